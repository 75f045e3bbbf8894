"""Experiment orchestration: training loops, random baseline, rolling reward
ratio, validation replay against the simulator, repeat aggregation, reports.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import agents as ag
from . import neural
from .datagen import INPUT_FIELDS, Profile, get_profile, sample_inputs, split_inputs
from .errors import FormatError, MetricError, ValidationError
from .mesh_sim import BackendConfig, simulate
from .surrogate import SurrogateModel, load_model, predict

log = logging.getLogger(__name__)

PARADIGMS = (
    "single-thread",
    "single-call",
    "independent",
    "thread-call",
    "call-thread",
    "collab-call",
    "collab-thread",
    "collab-both",
)
WINDOW = 25
DESK_EPOCHS = 60
DESK_INTERACTIONS = 200
ORACLE = "oracle"
CALIBRATION_ROUNDS = 64
RUN_FORMAT = "meshrl-run/1"


@dataclass
class ExperimentConfig:
    paradigm: str
    profiles: list[str]
    surrogates: list[str]
    epochs: int = 500
    interactions: int = 1000
    desk_scale: bool = False
    repeats: int = 3
    seed: int = 0
    beta: float = 0.5
    update_rule: str = "qreg"
    snet_aux: bool = False
    alpha: float = 1.0
    eps_start: float = 0.3
    eps_end: float = 0.02
    window: int = WINDOW
    backend: dict = field(default_factory=lambda: BackendConfig().to_dict())

    def __post_init__(self):
        if isinstance(self.profiles, str):
            self.profiles = self.profiles.split(",")
        if isinstance(self.surrogates, str):
            self.surrogates = self.surrogates.split(",")
        self.profiles = [p.lower() for p in self.profiles]
        if self.desk_scale:
            self.epochs, self.interactions = DESK_EPOCHS, DESK_INTERACTIONS
        self.validate()

    @property
    def is_collab(self) -> bool:
        return self.paradigm.startswith("collab")

    @property
    def n_services(self) -> int:
        return len(self.surrogates) if self.is_collab else 1

    @property
    def service_profiles(self) -> list[str]:
        if len(self.profiles) == 1:
            return self.profiles * self.n_services
        return list(self.profiles)

    def backend_config(self) -> BackendConfig:
        return BackendConfig.from_dict(self.backend)

    def validate(self) -> None:
        if self.paradigm not in PARADIGMS:
            raise ValidationError(f"unknown paradigm {self.paradigm!r}; expected one of {PARADIGMS}")
        if self.window < 1:
            raise ValidationError("window must be >= 1")
        if self.epochs < self.window:
            raise ValidationError(f"epochs ({self.epochs}) must be >= rolling window ({self.window})")
        if self.interactions < 1:
            raise ValidationError("interactions must be >= 1")
        if self.repeats < 1:
            raise ValidationError("repeats must be >= 1")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")
        if not self.surrogates:
            raise ValidationError("at least one surrogate (or 'oracle') is required")
        if not self.is_collab and len(self.surrogates) != 1:
            raise ValidationError(f"paradigm {self.paradigm} takes exactly one surrogate")
        if len(self.profiles) not in (1, self.n_services):
            raise ValidationError("give one profile, or one per surrogate")
        for p in self.profiles:
            get_profile(p)
        if self.update_rule not in ("qreg", "reinforce"):
            raise ValidationError(f"update rule must be 'qreg' or 'reinforce', got {self.update_rule!r}")
        if self.update_rule == "reinforce" and self.is_collab:
            raise ValidationError("collaborative paradigms support only the qreg update rule")
        if self.snet_aux and not self.is_collab:
            raise ValidationError("--snet-aux applies to collaborative paradigms only")
        if not (np.isfinite(self.beta) and self.beta >= 0):
            raise ValidationError("beta must be finite and >= 0")
        if not (0 <= self.eps_end <= 1 and 0 <= self.eps_start <= 1):
            raise ValidationError("exploration rates must lie in [0, 1]")
        self.backend_config()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# --- environments ----------------------------------------------------------

def surrogate_env(model: SurrogateModel) -> ag.Environment:
    return lambda x, seeds: predict(model, x)


def mesh_env(cfg: BackendConfig) -> ag.Environment:
    def env(x: np.ndarray, seeds: Sequence[int]) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if len(seeds) != len(x):
            raise ValidationError(f"{len(x)} input rows but {len(seeds)} seeds")
        out = np.empty((len(x), 2))
        for row, (inputs, seed) in enumerate(zip(x, seeds)):
            rules, load = split_inputs(inputs)
            resp = simulate(rules, load, cfg, int(seed))
            out[row] = (resp.qps, resp.p503)
        return out
    return env


def build_envs(config: ExperimentConfig, models: dict[str, SurrogateModel] | None = None) -> list[ag.Environment]:
    models = models or {}
    envs = []
    for name in config.surrogates:
        if name == ORACLE:
            envs.append(mesh_env(config.backend_config()))
        else:
            model = models.get(name) or load_model(name)
            envs.append(surrogate_env(model))
    return envs


def replay_seed(base: int, round_index: int, service: int) -> int:
    """Environment seed for one (round, service); shared by agent and baseline."""
    return int(np.random.SeedSequence([base, round_index, service]).generate_state(1, np.uint64)[0])


# --- metric ----------------------------------------------------------------

def _window_ratio(rl: Sequence[float], base: Sequence[float], end: int, window: int) -> float:
    lo = end - window + 1
    denom = float(np.mean(base[lo:end + 1]))
    if denom <= 0:
        raise MetricError(f"baseline rolling mean is {denom} in window ending at epoch {end}")
    return float(np.mean(rl[lo:end + 1])) / denom


def rolling_ratio(rl_series: Sequence[float], base_series: Sequence[float],
                  window: int = WINDOW) -> tuple[list[float | None], float, int]:
    """Windowed mean ratio per epoch (None before the first full window), its max and argmax."""
    if len(rl_series) != len(base_series):
        raise ValidationError("series lengths differ")
    if len(rl_series) < window:
        raise ValidationError(f"series of length {len(rl_series)} shorter than window {window}")
    rl = np.asarray(rl_series, dtype=float)
    base = np.asarray(base_series, dtype=float)
    ratios: list[float | None] = [None] * (window - 1)
    ratios += [_window_ratio(rl, base, e, window) for e in range(window - 1, len(rl))]
    valid = np.array(ratios[window - 1:])
    best = int(np.argmax(valid))
    return ratios, float(valid[best]), best + window - 1


def baseline_action(space: ag.ActionSpace, rng: np.random.Generator) -> int:
    return int(rng.integers(len(space)))


def round_reward(qps: Sequence[float], p503: Sequence[float], collab: bool, beta: float) -> float:
    if collab:
        return sum(ag.reward_multi(k + 1, qps, p503, beta) for k in range(len(qps)))
    return ag.reward_503(qps[0], p503[0])


# --- report ----------------------------------------------------------------

@dataclass
class RunReport:
    paradigm: str
    repeat: int
    rl_series: list[float]
    base_series: list[float]
    ratio_series: list[float | None]
    best_epoch: int
    simulated_ratio: float
    window: int
    interactions: int
    # best window log: (window, interactions, services, 9)
    rl_inputs: np.ndarray
    base_inputs: np.ndarray
    validated_ratio: float | None = None
    elapsed_s: float = 0.0  # wall clock; not serialized

    @property
    def window_start(self) -> int:
        return self.best_epoch - self.window + 1

    def to_dict(self) -> dict:
        return {
            "paradigm": self.paradigm,
            "repeat": self.repeat,
            "rl_series": self.rl_series,
            "base_series": self.base_series,
            "ratio_series": self.ratio_series,
            "best_epoch": self.best_epoch,
            "simulated_ratio": self.simulated_ratio,
            "validated_ratio": self.validated_ratio,
            "window": self.window,
            "interactions": self.interactions,
            "best_window_log": {
                "rl_inputs": self.rl_inputs.tolist(),
                "base_inputs": self.base_inputs.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        try:
            logd = d["best_window_log"]
            rep = cls(d["paradigm"], d["repeat"], list(d["rl_series"]), list(d["base_series"]),
                      list(d["ratio_series"]), d["best_epoch"], d["simulated_ratio"], d["window"],
                      d["interactions"], np.array(logd["rl_inputs"], dtype=float),
                      np.array(logd["base_inputs"], dtype=float), d.get("validated_ratio"))
        except (KeyError, TypeError) as e:
            raise FormatError(f"run report malformed: {e}") from None
        n = len(rep.rl_series)
        if len(rep.base_series) != n or len(rep.ratio_series) != n or not 0 <= rep.best_epoch < n:
            raise FormatError("run report series are inconsistent")
        return rep


# --- learners --------------------------------------------------------------

class _Learners:
    """The paradigm's agents plus the glue to run one round and its baseline."""

    def __init__(self, config: ExperimentConfig, profiles: list[Profile], seed: int):
        self.config = config
        self.profiles = profiles
        p = config.paradigm
        self.kinds: tuple[str, ...]
        self.single = self.multi = None
        self.groups: dict[str, ag.CollabNets] = {}
        seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(2)]
        prof = profiles[0]
        if p.startswith("single"):
            kind = p.split("-")[1]
            fields_ = ag.single_state_fields(kind)
            self.single = ag.make_agent(ag.action_space(prof, kind), fields_, seeds[0], prof)
            self.kinds = (kind,)
        elif p in ag.MULTI_MODES:
            layout = ag.multi_state_fields(p)
            self.multi = {k: ag.make_agent(ag.action_space(prof, k), layout[k], seeds[i], prof)
                          for i, k in enumerate(("thread", "call"))}
            self.kinds = ("thread", "call")
        else:
            kind = p.split("-")[1]
            kinds = ("thread", "call") if kind == "both" else (kind,)
            for i, k in enumerate(kinds):
                spaces = {ag.action_space(pr, k) for pr in profiles}
                if len(spaces) != 1:
                    raise ValidationError("collaborating services must share one action grid")
                self.groups[k] = ag.make_collab(spaces.pop(), ag.collab_state_fields(k, kind == "both"),
                                                len(profiles), seeds[i], profiles, aux=config.snet_aux)
            self.kinds = kinds
        self._aux_prev: dict[str, list] = {}

    def spaces(self, service: int) -> dict[str, ag.ActionSpace]:
        prof = self.profiles[service]
        return {k: ag.action_space(prof, k) for k in self.kinds}

    def all_nets(self) -> list:
        if self.single is not None:
            return [self.single]
        if self.multi is not None:
            return list(self.multi.values())
        return list(self.groups.values())

    def set_epsilon(self, eps: float) -> None:
        for n in self.all_nets():
            n.epsilon = eps

    def set_reward_scale(self, scale: float) -> None:
        for n in self.all_nets():
            n.reward_scale = scale

    def step(self, envs, sampled, seeds) -> tuple[np.ndarray, list[float], list[float]]:
        """Run one learning round; returns (inputs per service, qps list, p503 list)."""
        c = self.config
        if self.single is not None:
            s = ag.run_round_single(self.single, envs[0], self.profiles[0], None, seeds[0], sampled[0],
                                    c.update_rule, c.alpha)
            return s.inputs[None, :], [s.qps], [s.p503]
        if self.multi is not None:
            s = ag.run_round_multi(self.multi, c.paradigm, envs[0], self.profiles[0], None, seeds[0],
                                   sampled[0], c.update_rule, c.alpha)
            return s.inputs[None, :], [s.qps], [s.p503]
        out = ag.run_round_collab(self.groups, envs, self.profiles, c.beta, None, seeds, sampled)
        if c.snet_aux:
            self._aux_step(out)
        return (np.array([s.inputs for s in out.steps]), [s.qps for s in out.steps],
                [s.p503 for s in out.steps])

    def _aux_step(self, out: ag.CollabLog) -> None:
        # transitions (s_{t-1}, ms_{t-1}, s_t) per service, in the net's input units
        for kind, g in self.groups.items():
            now = [g.normalize(k, s.states[kind]) for k, s in enumerate(out.steps)]
            prev = self._aux_prev.get(kind)
            if prev is not None:
                buf = [(p, neural.forward(g.snet, p)[0], cur) for p, cur in zip(prev, now)]
                ag.snet_aux_update(g, buf)
            self._aux_prev[kind] = now


def _baseline_inputs(sampled: np.ndarray, spaces: dict[str, ag.ActionSpace], rng: np.random.Generator) -> np.ndarray:
    x = np.array(sampled, dtype=float)
    for kind in ("thread", "call"):
        if kind in spaces:
            sp = spaces[kind]
            x[INPUT_FIELDS.index(sp.field)] = sp.values[baseline_action(sp, rng)]
    return x


def calibrate_reward_scale(envs, profiles, spaces_fn, seed: int, rounds: int = CALIBRATION_ROUNDS) -> float:
    """Largest 503 reward seen under uniformly random actions.

    Q targets are divided by this, which puts them roughly in [0, 1]; the
    reward is heavy-tailed, and scaling by the mean instead leaves the rare
    large rewards too big for the small agent learning rate to track.
    """
    rng = np.random.default_rng(seed)
    top = 0.0
    for r in range(rounds):
        for svc, (env, prof) in enumerate(zip(envs, profiles)):
            x = _baseline_inputs(sample_inputs(prof, rng), spaces_fn(svc), rng)
            qps, p503 = env(x[None, :], [replay_seed(seed, r, svc)])[0]
            top = max(top, ag.reward_503(float(qps), float(p503)))
    return top if top > 0 and np.isfinite(top) else 1.0


def run_experiment(config: ExperimentConfig, envs: Sequence[ag.Environment], repeat: int = 0) -> RunReport:
    """Train the configured paradigm against ``envs`` and track the random baseline alongside."""
    t0 = time.perf_counter()
    n = config.n_services
    if len(envs) != n:
        raise ValidationError(f"paradigm needs {n} environments, got {len(envs)}")
    profiles = [get_profile(p) for p in config.service_profiles]
    state_seed, learner_seed, base_seed, calib_seed = (
        int(s) for s in np.random.SeedSequence([config.seed, repeat]).generate_state(4))
    learners = _Learners(config, profiles, learner_seed)
    learners.set_reward_scale(calibrate_reward_scale(envs, profiles, learners.spaces, calib_seed))
    spaces = [learners.spaces(s) for s in range(n)]
    state_rng = np.random.default_rng(state_seed)
    base_rng = np.random.default_rng(base_seed)

    E, K, W = config.epochs, config.interactions, config.window
    total = E * K
    rl_series: list[float] = []
    base_series: list[float] = []
    recent: deque = deque(maxlen=W)
    best_ratio, best_epoch, best_logs = -np.inf, -1, None

    for e in range(E):
        rl_in = np.empty((K, n, 9))
        base_in = np.empty((K, n, 9))
        base_q = np.empty((K, n))
        base_p = np.empty((K, n))
        # the baseline never learns, so its whole epoch is drawn up front and
        # sent to each environment as one batch; the per-stream draw order is
        # the same as interleaving it with the agent
        states = [[sample_inputs(p, state_rng) for p in profiles] for _ in range(K)]
        seeds = [[replay_seed(config.seed, e * K + k, s) for s in range(n)] for k in range(K)]
        for k in range(K):
            for s in range(n):
                base_in[k, s] = _baseline_inputs(states[k][s], spaces[s], base_rng)
        for s in range(n):
            out = envs[s](base_in[:, s], [row[s] for row in seeds])
            base_q[:, s], base_p[:, s] = out[:, 0], out[:, 1]
        rl_sum = base_sum = 0.0
        for k in range(K):
            g = e * K + k
            learners.set_epsilon(config.eps_start + (config.eps_end - config.eps_start) * g / max(total - 1, 1))
            x_rl, q_rl, p_rl = learners.step(envs, states[k], seeds[k])
            rl_in[k] = x_rl
            rl_sum += round_reward(q_rl, p_rl, config.is_collab, config.beta)
            base_sum += round_reward([float(v) for v in base_q[k]], [float(v) for v in base_p[k]],
                                     config.is_collab, config.beta)
        rl_series.append(rl_sum)
        base_series.append(base_sum)
        recent.append((rl_in, base_in))
        if e >= W - 1:
            ratio = _window_ratio(rl_series, base_series, e, W)
            if ratio > best_ratio:
                best_ratio, best_epoch, best_logs = ratio, e, list(recent)
        log.info("repeat %d epoch %d rl %.4g base %.4g", repeat, e, rl_sum, base_sum)

    ratios, sim, arg = rolling_ratio(rl_series, base_series, W)
    assert arg == best_epoch and sim == best_ratio
    report = RunReport(
        paradigm=config.paradigm,
        repeat=repeat,
        rl_series=rl_series,
        base_series=base_series,
        ratio_series=ratios,
        best_epoch=best_epoch,
        simulated_ratio=sim,
        window=W,
        interactions=K,
        rl_inputs=np.array([a for a, _ in best_logs]),
        base_inputs=np.array([b for _, b in best_logs]),
    )
    report.elapsed_s = time.perf_counter() - t0
    return report


def run_repeats(config: ExperimentConfig, envs: Sequence[ag.Environment]) -> list[RunReport]:
    return [run_experiment(config, envs, r) for r in range(config.repeats)]


def validate_best(report: RunReport, cfg: BackendConfig, seed: int, beta: float = 0.5) -> float:
    """Replay the best window's agent and baseline inputs through the simulator.

    Seeds per (round, service) follow :func:`replay_seed`, so validating an
    oracle-mode run with the run's own seed reproduces its simulated ratio.
    """
    if report.rl_inputs.size == 0:
        raise ValidationError("report has no best-epoch log to validate")
    env = mesh_env(cfg)
    W, K, n = report.rl_inputs.shape[:3]
    collab = report.paradigm.startswith("collab")
    rl_sums, base_sums = [], []
    for j in range(W):
        e = report.window_start + j
        rl_sum = base_sum = 0.0
        for k in range(K):
            g = e * K + k
            seeds = [replay_seed(seed, g, s) for s in range(n)]
            rl = env(report.rl_inputs[j, k], seeds)
            bs = env(report.base_inputs[j, k], seeds)
            rl_sum += round_reward([float(v) for v in rl[:, 0]], [float(v) for v in rl[:, 1]], collab, beta)
            base_sum += round_reward([float(v) for v in bs[:, 0]], [float(v) for v in bs[:, 1]], collab, beta)
        rl_sums.append(rl_sum)
        base_sums.append(base_sum)
    return _window_ratio(rl_sums, base_sums, W - 1, W)


@dataclass
class Aggregate:
    repeats: int
    simulated_ratio: float
    validated_ratio: float | None
    rl_series: list[float]
    base_series: list[float]
    ratio_series: list[float | None]

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate_repeats(reports: Sequence[RunReport]) -> Aggregate:
    if not reports:
        raise ValidationError("nothing to aggregate")
    n = len(reports[0].rl_series)
    if any(len(r.rl_series) != n for r in reports):
        raise ValidationError("reports have different epoch counts")
    sims = [r.simulated_ratio for r in reports]
    vals = [r.validated_ratio for r in reports]
    ratio_cols = list(zip(*(r.ratio_series for r in reports)))
    return Aggregate(
        repeats=len(reports),
        simulated_ratio=float(np.mean(sims)),
        validated_ratio=None if any(v is None for v in vals) else float(np.mean(vals)),
        rl_series=[float(v) for v in np.mean([r.rl_series for r in reports], axis=0)],
        base_series=[float(v) for v in np.mean([r.base_series for r in reports], axis=0)],
        ratio_series=[None if c[0] is None else float(np.mean(c)) for c in ratio_cols],
    )


# --- files -----------------------------------------------------------------

def _dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def epochs_csv(rl: Sequence[float], base: Sequence[float], ratio: Sequence[float | None]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "rl_cum_reward", "base_cum_reward", "rolling_ratio"])
    for e, (a, b, r) in enumerate(zip(rl, base, ratio)):
        w.writerow([e, repr(float(a)), repr(float(b)), "" if r is None else repr(float(r))])
    return buf.getvalue()


def report_summary(report: RunReport, config: ExperimentConfig | None = None) -> dict:
    return {
        "config": config.to_dict() if config else None,
        "paradigm": report.paradigm,
        "repeat": report.repeat,
        "best_epoch": report.best_epoch,
        "window": report.window,
        "simulated_ratio": report.simulated_ratio,
        "validated_ratio": report.validated_ratio,
    }


def emit_report(report: RunReport, path, config: ExperimentConfig | None = None) -> list[Path]:
    """Write ``summary.json`` and ``epochs.csv`` for one run into directory ``path``."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        summary = out / "summary.json"
        table = out / "epochs.csv"
        summary.write_text(_dumps(report_summary(report, config)), encoding="utf-8")
        table.write_text(epochs_csv(report.rl_series, report.base_series, report.ratio_series),
                         encoding="utf-8", newline="")
    except OSError as e:
        raise OSError(f"cannot write report to {out}: {e}") from e
    return [summary, table]


def emit_run_report(config: ExperimentConfig, reports: Sequence[RunReport], path) -> list[Path]:
    """Per-repeat reports in ``repeat_<k>/`` plus the aggregate at the top level."""
    out = Path(path)
    written = []
    for r in reports:
        written += emit_report(r, out / f"repeat_{r.repeat}", config)
    agg = aggregate_repeats(reports)
    doc = {"config": config.to_dict(), "aggregate": {k: v for k, v in agg.to_dict().items()
                                                     if not k.endswith("_series")},
           "repeats": [report_summary(r) for r in reports]}
    (out / "summary.json").write_text(_dumps(doc), encoding="utf-8")
    (out / "epochs.csv").write_text(epochs_csv(agg.rl_series, agg.base_series, agg.ratio_series),
                                    encoding="utf-8", newline="")
    return written + [out / "summary.json", out / "epochs.csv"]


def save_run(config: ExperimentConfig, reports: Sequence[RunReport], path) -> None:
    doc = {"format": RUN_FORMAT, "config": config.to_dict(), "repeats": [r.to_dict() for r in reports]}
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_run(path) -> tuple[ExperimentConfig, list[RunReport]]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not a run file ({e})") from None
    if doc.get("format") != RUN_FORMAT:
        raise FormatError(f"{path}: unsupported run format {doc.get('format')!r}")
    config = ExperimentConfig.from_dict(doc["config"])
    return config, [RunReport.from_dict(r) for r in doc["repeats"]]
