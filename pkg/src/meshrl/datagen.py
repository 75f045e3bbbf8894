"""Dataset profiles, trace generation, splitting, scaling and CSV I/O."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, NumericError, ValidationError
from .mesh_sim import BackendConfig, LoadAction, TrafficRules, simulate

INPUT_FIELDS = (
    "max_pending",
    "max_connections",
    "max_req_per_conn",
    "ejection_time_s",
    "max_ejection_pct",
    "interval_s",
    "consecutive_errors",
    "threads",
    "calls",
)
OUTPUT_FIELDS = ("qps", "p503")
CSV_HEADER = INPUT_FIELDS + OUTPUT_FIELDS
RULE_FIELDS = INPUT_FIELDS[:7]
THREADS_SLOT = 7
CALLS_SLOT = 8

# fields written as reals; everything else in the input block is an integer count
_REAL_FIELDS = {"ejection_time_s", "max_ejection_pct", "interval_s", "qps", "p503"}


@dataclass(frozen=True)
class Profile:
    name: str
    # inclusive integer range per input field, in INPUT_FIELDS order
    ranges: tuple[tuple[int, int], ...]
    reference_size: int = 0

    def __post_init__(self):
        if len(self.ranges) != len(INPUT_FIELDS):
            raise ValidationError(f"profile {self.name}: need {len(INPUT_FIELDS)} ranges")
        for field, (lo, hi) in zip(INPUT_FIELDS, self.ranges):
            if lo > hi:
                raise ValidationError(f"profile {self.name}: empty range for {field}")

    def range_of(self, field: str) -> tuple[int, int]:
        return self.ranges[INPUT_FIELDS.index(field)]

    @property
    def lows(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.ranges], dtype=float)

    @property
    def highs(self) -> np.ndarray:
        return np.array([hi for _, hi in self.ranges], dtype=float)

    def contains(self, inputs: Sequence[float]) -> bool:
        x = np.asarray(inputs, dtype=float)
        return bool(np.all(x >= self.lows) and np.all(x <= self.highs))


def _profile(name, pending, conns, rpc, max_ej, consec, threads, calls, size):
    # ejection time 3 min and interval 1 s are fixed in every profile
    return Profile(name, (pending, conns, rpc, (180, 180), max_ej, (1, 1), consec, threads, calls), size)


PROFILES: dict[str, Profile] = {
    p.name: p
    for p in (
        _profile("s1", (1, 7), (1, 7), (1, 7), (100, 100), (1, 1), (1, 5), (400, 450), 9302),
        _profile("s2", (3, 7), (3, 7), (3, 7), (100, 100), (1, 1), (3, 7), (100, 700), 12005),
        _profile("s3", (12, 18), (1, 5), (10, 16), (4, 8), (4, 8), (10, 16), (50, 500), 20592),
        _profile("s4", (12, 18), (10, 20), (12, 18), (12, 18), (12, 18), (12, 18), (250, 600), 12310),
        _profile("s5", (15, 30), (5, 15), (15, 30), (22, 30), (22, 30), (16, 20), (1000, 2000), 6970),
    )
}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name.lower()]
    except KeyError:
        raise ValidationError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}") from None


def sample_inputs(profile: Profile, rng: np.random.Generator) -> np.ndarray:
    """One uniform draw per field, in canonical order, as a float 9-vector."""
    return np.array([rng.integers(lo, hi + 1) for lo, hi in profile.ranges], dtype=float)


def split_inputs(x: Sequence[float]) -> tuple[TrafficRules, LoadAction]:
    v = [float(a) for a in x]
    rules = TrafficRules(
        max_pending_requests=int(v[0]),
        max_connections=int(v[1]),
        max_requests_per_connection=int(v[2]),
        ejection_time=v[3],
        max_ejection_pct=v[4],
        interval_time=v[5],
        consecutive_errors=int(v[6]),
    )
    for name, raw in zip(INPUT_FIELDS, v):
        if name not in _REAL_FIELDS and not raw.is_integer():
            raise ValidationError(f"{name} must be an integer, got {raw!r}")
    return rules, LoadAction(threads=int(v[7]), calls=int(v[8]))


def sample_config(profile: Profile, rng: np.random.Generator) -> tuple[TrafficRules, LoadAction]:
    return split_inputs(sample_inputs(profile, rng))


@dataclass(frozen=True)
class TraceRecord:
    inputs: tuple[float, ...]
    qps: float
    p503: float

    @property
    def outputs(self) -> tuple[float, float]:
        return (self.qps, self.p503)


def label(inputs: Sequence[float], cfg: BackendConfig, seed: int) -> TraceRecord:
    rules, load = split_inputs(inputs)
    out = simulate(rules, load, cfg, seed)
    return TraceRecord(tuple(float(a) for a in inputs), out.qps, out.p503)


def generate_dataset(profile: Profile, size: int, seed: int, cfg: BackendConfig | None = None) -> list[TraceRecord]:
    if size < 1:
        raise ValidationError(f"size must be >= 1, got {size}")
    cfg = cfg or BackendConfig()
    rng = np.random.default_rng(seed)
    return [label(sample_inputs(profile, rng), cfg, seed ^ i) for i in range(size)]


def to_arrays(records: Sequence[TraceRecord]) -> tuple[np.ndarray, np.ndarray]:
    x = np.array([r.inputs for r in records], dtype=float).reshape(-1, len(INPUT_FIELDS))
    y = np.array([r.outputs for r in records], dtype=float).reshape(-1, 2)
    return x, y


def split_dataset(records: Sequence, ratio: float, seed: int) -> tuple[list, list]:
    n = len(records)
    if not 0.0 < ratio < 1.0:
        raise ValidationError(f"ratio must be in (0, 1), got {ratio}")
    if n < 2:
        raise ValidationError(f"need at least 2 records to split, got {n}")
    n_train = int(round(ratio * n))
    if n_train == 0 or n_train == n:
        raise ValidationError(f"split of {n} records at ratio {ratio} leaves an empty side")
    order = np.random.default_rng(seed).permutation(n)
    train = [records[i] for i in order[:n_train]]
    test = [records[i] for i in order[n_train:]]
    return train, test


@dataclass(frozen=True)
class ScalerParams:
    input_mean: np.ndarray
    input_std: np.ndarray
    output_mean: np.ndarray
    output_std: np.ndarray

    def scale_x(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.input_mean) / self.input_std

    def scale_y(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.output_mean) / self.output_std

    def unscale_x(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.input_std + self.input_mean

    def unscale_y(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.output_std + self.output_mean

    def to_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)] for k in
                ("input_mean", "input_std", "output_mean", "output_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerParams":
        try:
            parts = {k: np.array(d[k], dtype=float) for k in
                     ("input_mean", "input_std", "output_mean", "output_std")}
        except KeyError as e:
            raise FormatError(f"scaler block missing {e.args[0]!r}") from None
        if parts["input_mean"].shape != (9,) or parts["output_mean"].shape != (2,):
            raise FormatError("scaler block has wrong dimensions")
        return cls(**parts)


def _mean_std(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    # constant columns: leave them centred at zero rather than dividing by 0
    std = np.where(std > 0, std, 1.0)
    return mean, std


def fit_scaler(train) -> ScalerParams:
    """z-score parameters from the training split (population std)."""
    x, y = train if isinstance(train, tuple) else to_arrays(train)
    if len(x) == 0:
        raise ValidationError("cannot fit a scaler on an empty training set")
    with np.errstate(over="ignore", invalid="ignore"):
        xm, xs = _mean_std(x)
        ym, ys = _mean_std(y)
    if not all(np.all(np.isfinite(a)) for a in (xm, xs, ym, ys)):
        raise NumericError("scaler statistics overflow; training data values are too large")
    return ScalerParams(xm, xs, ym, ys)


def apply_scaler(params: ScalerParams, records) -> tuple[np.ndarray, np.ndarray]:
    x, y = records if isinstance(records, tuple) else to_arrays(records)
    return params.scale_x(x), params.scale_y(y)


def invert_scaler(params: ScalerParams, scaled: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    zx, zy = scaled
    return params.unscale_x(zx), params.unscale_y(zy)


def _fmt(name: str, value: float) -> str:
    if name in _REAL_FIELDS:
        return repr(float(value))
    return str(int(value))


def format_csv(records: Iterable[TraceRecord]) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_HEADER) + "\n")
    for r in records:
        vals = list(r.inputs) + [r.qps, r.p503]
        buf.write(",".join(_fmt(n, v) for n, v in zip(CSV_HEADER, vals)) + "\n")
    return buf.getvalue()


def write_csv(records: Iterable[TraceRecord], path) -> None:
    Path(path).write_text(format_csv(records), encoding="utf-8", newline="")


def read_csv(path) -> list[TraceRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise FormatError(f"{path}: missing or unexpected header, expected {','.join(CSV_HEADER)}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise FormatError(f"{path}: line {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                vals = [float(v) if n in _REAL_FIELDS else int(v) for n, v in zip(CSV_HEADER, row)]
            except ValueError as e:
                raise FormatError(f"{path}: line {lineno}: {e}") from None
            records.append(TraceRecord(tuple(float(v) for v in vals[:9]), vals[9], vals[10]))
    return records
