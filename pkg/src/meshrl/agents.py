"""Rewards, Q-networks and the single / multi / collaborative learning rounds.

Every round is a contextual bandit: a fresh traffic-rule state is drawn,
agents pick loading settings from discrete grids, the environment (the
surrogate, or the simulator itself in oracle mode) responds, and each
agent regresses its chosen action's Q-value onto the immediate reward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import neural
from .datagen import INPUT_FIELDS, RULE_FIELDS, Profile, get_profile, sample_inputs
from .errors import NumericError, ValidationError
from .surrogate import concat_input

KIND_FIELD = {"thread": "threads", "call": "calls"}
OTHER_KIND = {"thread": "call", "call": "thread"}

AGENT_HIDDEN = (512, 512)
AGENT_LR = 5e-5
COLLAB_WIDTH = 512
COLLAB_LR = 1e-5

# Environment: (B, 9) raw inputs and one replay seed per row -> (B, 2) [qps, p503]
Environment = Callable[[np.ndarray, Sequence[int]], np.ndarray]


def _grid(start, stop, step=1):
    return tuple(range(start, stop + 1, step))


ACTION_GRIDS: dict[str, dict[str, tuple[int, ...]]] = {
    "s1": {"call": _grid(435, 450), "thread": _grid(1, 5)},
    "s2": {"call": _grid(100, 400, 100), "thread": _grid(3, 7)},
    "s3": {"call": _grid(50, 500, 50), "thread": _grid(10, 16)},
    "s4": {"call": _grid(250, 600, 50), "thread": _grid(12, 18)},
    "s5": {"call": _grid(1000, 2000, 100), "thread": _grid(16, 20)},
}


@dataclass(frozen=True)
class ActionSpace:
    kind: str
    values: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in KIND_FIELD:
            raise ValidationError(f"action kind must be 'thread' or 'call', got {self.kind!r}")
        if not self.values or any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ValidationError("action grid must be non-empty and strictly increasing")

    @property
    def field(self) -> str:
        return KIND_FIELD[self.kind]

    def __len__(self) -> int:
        return len(self.values)


def action_space(profile: str | Profile, kind: str) -> ActionSpace:
    prof = get_profile(profile) if isinstance(profile, str) else profile
    space = ActionSpace(kind, ACTION_GRIDS[prof.name][kind])
    lo, hi = prof.range_of(space.field)
    if space.values[0] < lo or space.values[-1] > hi:
        raise ValidationError(f"{kind} grid for {prof.name} leaves the profile range")
    return space


# --- rewards -------------------------------------------------------------

def reward_503(qps: float, p503: float) -> float:
    return qps * p503


def reward_multi(n: int, all_qps: Sequence[float], all_p503: Sequence[float], beta: float) -> float:
    """Own 503 reward plus ``beta`` times the mean 503 reward over all services (n is 1-based)."""
    if len(all_qps) != len(all_p503) or not all_qps:
        raise ValidationError("qps and p503 lists must be non-empty and of equal length")
    if not 1 <= n <= len(all_qps):
        raise ValidationError(f"service index {n} out of range 1..{len(all_qps)}")
    total = sum(q * p for q, p in zip(all_qps, all_p503))
    return all_qps[n - 1] * all_p503[n - 1] + beta * total / len(all_qps)


# --- networks ------------------------------------------------------------

def state_normalizer(profile: Profile, state_fields: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Map each state field's profile range onto [-1, 1]; fixed fields go to 0."""
    lo = np.array([profile.range_of(f)[0] for f in state_fields], dtype=float)
    hi = np.array([profile.range_of(f)[1] for f in state_fields], dtype=float)
    half = (hi - lo) / 2.0
    return (hi + lo) / 2.0, np.where(half > 0, half, 1.0)


@dataclass
class AgentNet:
    net: neural.DenseNet
    opt: neural.AdamState
    space: ActionSpace
    state_fields: tuple[str, ...]
    rng: np.random.Generator
    epsilon: float = 0.3
    state_offset: np.ndarray | None = None
    state_scale: np.ndarray | None = None
    reward_scale: float = 1.0

    @property
    def state_dim(self) -> int:
        return len(self.state_fields)

    def normalize(self, state) -> np.ndarray:
        s = np.asarray(state, dtype=float)
        if s.shape[-1] != self.state_dim:
            raise ValidationError(f"state has {s.shape[-1]} fields, agent expects {self.state_dim}")
        if self.state_offset is not None:
            s = (s - self.state_offset) / self.state_scale
        return s


def _zero_head(net: neural.DenseNet) -> neural.DenseNet:
    # every action starts with the same value, so early greedy picks are not
    # decided by random output weights
    net.weights[-1][:] = 0.0
    net.biases[-1][:] = 0.0
    return net


def make_agent(space: ActionSpace, state_fields: Sequence[str], seed: int, profile: Profile | None = None,
               hidden: Sequence[int] = AGENT_HIDDEN, learning_rate: float = AGENT_LR,
               epsilon: float = 0.3) -> AgentNet:
    ss = np.random.SeedSequence(seed)
    init_seed, rng_seed = (int(s) for s in ss.generate_state(2))
    net = _zero_head(neural.net_init([len(state_fields), *hidden, len(space)], init_seed))
    offset = scale = None
    if profile is not None:
        offset, scale = state_normalizer(profile, state_fields)
    return AgentNet(net, neural.adam_init(net, learning_rate), space, tuple(state_fields),
                    np.random.default_rng(rng_seed), epsilon, offset, scale)


@dataclass
class CollabNets:
    """One shared front block (SNet) and a private head (PNet) per service."""

    snet: neural.DenseNet
    pnets: list[neural.DenseNet]
    snet_opt: neural.AdamState
    pnet_opts: list[neural.AdamState]
    space: ActionSpace
    state_fields: tuple[str, ...]
    rng: np.random.Generator
    epsilon: float = 0.3
    normalizers: list[tuple[np.ndarray, np.ndarray]] | None = None
    reward_scale: float = 1.0
    aux_head: neural.DenseNet | None = None
    aux_opt: neural.AdamState | None = None

    @property
    def n_services(self) -> int:
        return len(self.pnets)

    @property
    def state_dim(self) -> int:
        return len(self.state_fields)

    def service_view(self, n: int) -> tuple[neural.DenseNet, neural.DenseNet]:
        """(SNet, PNet_n) as seen by service ``n`` (0-based)."""
        return self.snet, self.pnets[n]

    def normalize(self, n: int, state) -> np.ndarray:
        s = np.asarray(state, dtype=float)
        if s.shape[-1] != self.state_dim:
            raise ValidationError(f"state has {s.shape[-1]} fields, collab net expects {self.state_dim}")
        if self.normalizers is not None:
            off, sc = self.normalizers[n]
            s = (s - off) / sc
        return s


def make_collab(space: ActionSpace, state_fields: Sequence[str], n_services: int, seed: int,
                profiles: Sequence[Profile] | None = None, width: int = COLLAB_WIDTH,
                learning_rate: float = COLLAB_LR, epsilon: float = 0.3, aux: bool = False) -> CollabNets:
    if n_services < 1:
        raise ValidationError("need at least one service")
    ss = np.random.SeedSequence(seed)
    seeds = [int(s) for s in ss.generate_state(n_services + 3)]
    d = len(state_fields)
    snet = neural.net_init([d, width], seeds[0], output_activation="relu")
    pnets = [_zero_head(neural.net_init([width, width, len(space)], seeds[2 + i])) for i in range(n_services)]
    norms = None
    if profiles is not None:
        if len(profiles) != n_services:
            raise ValidationError("one profile per service required")
        norms = [state_normalizer(p, state_fields) for p in profiles]
    nets = CollabNets(snet, pnets, neural.adam_init(snet, learning_rate),
                      [neural.adam_init(p, learning_rate) for p in pnets], space, tuple(state_fields),
                      np.random.default_rng(seeds[1]), epsilon, norms)
    if aux:
        # linear map [state; ms] -> next state
        nets.aux_head = neural.net_init([d + width, d], seeds[-1])
        nets.aux_opt = neural.adam_init(nets.aux_head, learning_rate)
    return nets


def q_values(net: AgentNet | CollabNets, state, service: int | None = None) -> np.ndarray:
    if isinstance(net, CollabNets):
        if service is None:
            raise ValidationError("collaborative q_values needs a service index")
        ms, _ = neural.forward(net.snet, net.normalize(service, state))
        return neural.forward(net.pnets[service], ms)[0]
    return neural.forward(net.net, net.normalize(state))[0]


def select_action(qvals, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties go to the lowest index."""
    q = np.asarray(qvals, dtype=float)
    if q.size == 0:
        raise ValidationError("empty Q-value vector")
    if rng.random() < epsilon:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def sample_policy(qvals, rng: np.random.Generator) -> int:
    p = softmax(np.asarray(qvals, dtype=float))
    return int(rng.choice(p.size, p=p))


def _q_regression_grad(q: np.ndarray, action: int, target: float) -> tuple[float, np.ndarray]:
    err = q[action] - target
    loss = float(err * err)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite Q-regression loss (Q={q[action]!r}, target={target!r})")
    d = np.zeros_like(q)
    d[action] = 2.0 * err
    return loss, d


def update_q_regression(agent: AgentNet, state, action: int, reward: float) -> float:
    """One Adam step on (Q(state)[action] - reward)^2; other outputs get no gradient."""
    if not np.isfinite(reward):
        raise NumericError(f"non-finite reward {reward!r}")
    q, cache = neural.forward(agent.net, agent.normalize(state))
    loss, d = _q_regression_grad(q, action, reward / agent.reward_scale)
    neural.adam_step(agent.net, neural.backward(agent.net, cache, d), agent.opt)
    return loss


def trajectory_return(rewards: Sequence[float], alpha: float) -> float:
    return float(sum(r * alpha**t for t, r in enumerate(rewards)))


def update_reinforce(agent: AgentNet, trajectory: Sequence[tuple], alpha: float = 1.0) -> float:
    """Policy-gradient step treating Q outputs as softmax logits.

    Ascends sum_t log pi(a_t|s_t) * R, with R the alpha-discounted return of
    the whole trajectory.
    """
    if not trajectory:
        raise ValidationError("empty trajectory")
    states = np.array([agent.normalize(s) for s, _, _ in trajectory])
    actions = np.array([a for _, a, _ in trajectory])
    ret = trajectory_return([r for _, _, r in trajectory], alpha) / agent.reward_scale
    logits, cache = neural.forward(agent.net, states)
    probs = softmax(logits)
    rows = np.arange(len(actions))
    logp = np.log(probs[rows, actions])
    loss = float(-np.sum(logp) * ret)
    if not np.isfinite(loss):
        raise NumericError("non-finite policy-gradient loss")
    onehot = np.zeros_like(probs)
    onehot[rows, actions] = 1.0
    d = -ret * (onehot - probs)
    neural.adam_step(agent.net, neural.backward(agent.net, cache, d), agent.opt)
    return loss


# --- rounds --------------------------------------------------------------

@dataclass
class StepLog:
    inputs: np.ndarray  # 9-vector sent to the environment
    actions: dict[str, int]  # kind -> grid index
    states: dict[str, np.ndarray]  # kind -> state the agent saw
    qps: float
    p503: float
    reward: float
    losses: dict[str, float] = field(default_factory=dict)


def _act(agent: AgentNet, state: np.ndarray, update_rule: str) -> int:
    q = q_values(agent, state)
    if update_rule == "reinforce":
        return sample_policy(q, agent.rng)
    return select_action(q, agent.epsilon, agent.rng)


def _learn(agent: AgentNet, state, action: int, reward: float, update_rule: str, alpha: float) -> float:
    if update_rule == "reinforce":
        return update_reinforce(agent, [(state, action, reward)], alpha)
    return update_q_regression(agent, state, action, reward)


def state_from(values: dict[str, float], fields: Sequence[str]) -> np.ndarray:
    return np.array([values[f] for f in fields], dtype=float)


def run_round_single(agent: AgentNet, env: Environment, profile: Profile, rng: np.random.Generator,
                     seed: int = 0, sampled: np.ndarray | None = None, update_rule: str = "qreg",
                     alpha: float = 1.0, learn: bool = True) -> StepLog:
    """Sample a state, act, query the environment, reward, update."""
    if sampled is None:
        sampled = sample_inputs(profile, rng)
    values = dict(zip(INPUT_FIELDS, sampled))
    state = state_from(values, agent.state_fields)
    a = _act(agent, state, update_rule)
    i_t = concat_input(state, {agent.space.field: agent.space.values[a]}, agent.state_fields)
    qps, p503 = env(i_t[None, :], [seed])[0]
    r = reward_503(float(qps), float(p503))
    log = StepLog(i_t, {agent.space.kind: a}, {agent.space.kind: state}, float(qps), float(p503), r)
    if learn:
        log.losses[agent.space.kind] = _learn(agent, state, a, r, update_rule, alpha)
    return log


MULTI_MODES = ("independent", "thread-call", "call-thread")


def multi_state_fields(mode: str) -> dict[str, tuple[str, ...]]:
    """State layout per agent kind: independent (7, 7), dependent (7, 8)."""
    rules = tuple(RULE_FIELDS)
    if mode == "independent":
        return {"thread": rules, "call": rules}
    if mode in ("thread-call", "call-thread"):
        first, second = mode.split("-")
        return {first: rules, second: rules + (KIND_FIELD[first],)}
    raise ValidationError(f"unknown multi-agent mode {mode!r}")


def run_round_multi(agents: dict[str, AgentNet], mode: str, env: Environment, profile: Profile,
                    rng: np.random.Generator, seed: int = 0, sampled: np.ndarray | None = None,
                    update_rule: str = "qreg", alpha: float = 1.0, learn: bool = True) -> StepLog:
    if set(agents) != {"thread", "call"} or any(agents[k].space.kind != k for k in agents):
        raise ValidationError("multi-agent rounds need one thread agent and one call agent")
    layout = multi_state_fields(mode)
    for kind, ag in agents.items():
        if ag.state_fields != layout[kind]:
            raise ValidationError(f"{kind} agent state layout does not match mode {mode}")
    if sampled is None:
        sampled = sample_inputs(profile, rng)
    values = {f: sampled[INPUT_FIELDS.index(f)] for f in RULE_FIELDS}
    order = ("thread", "call") if mode != "call-thread" else ("call", "thread")
    states, acts = {}, {}
    for kind in order:
        ag = agents[kind]
        states[kind] = state_from(values, ag.state_fields)
        acts[kind] = _act(ag, states[kind], update_rule)
        if mode != "independent":
            values[ag.space.field] = float(ag.space.values[acts[kind]])
    # final input: rules plus both chosen loading values in canonical slots
    rule_state = state_from(values, RULE_FIELDS)
    i_t = concat_input(rule_state, {agents[k].space.field: agents[k].space.values[acts[k]] for k in order},
                       RULE_FIELDS)
    qps, p503 = env(i_t[None, :], [seed])[0]
    r = reward_503(float(qps), float(p503))
    log = StepLog(i_t, acts, states, float(qps), float(p503), r)
    if learn:
        for kind in order:
            log.losses[kind] = _learn(agents[kind], states[kind], acts[kind], r, update_rule, alpha)
    return log


def single_state_fields(kind: str) -> tuple[str, ...]:
    """7 rules plus the loading value the agent does not control."""
    return tuple(RULE_FIELDS) + (KIND_FIELD[OTHER_KIND[kind]],)


def collab_state_fields(kind: str, both: bool) -> tuple[str, ...]:
    return tuple(RULE_FIELDS) if both else single_state_fields(kind)


@dataclass
class CollabLog:
    steps: list[StepLog]  # one per service
    rewards: list[float]  # reward_multi per service


def collab_update(nets: CollabNets, states: Sequence[np.ndarray], actions: Sequence[int],
                  rewards: Sequence[float]) -> list[float]:
    """PNet_n gets one step from its own loss; SNet one step from the summed gradients."""
    n = nets.n_services
    if not len(states) == len(actions) == len(rewards) == n:
        raise ValidationError("collab update needs one state, action and reward per service")
    s_dw = [np.zeros_like(w) for w in nets.snet.weights]
    s_db = [np.zeros_like(b) for b in nets.snet.biases]
    losses = []
    pending = []
    for k in range(n):
        ms, s_cache = neural.forward(nets.snet, nets.normalize(k, states[k]))
        q, p_cache = neural.forward(nets.pnets[k], ms)
        loss, d = _q_regression_grad(q, actions[k], rewards[k] / nets.reward_scale)
        p_dw, p_db, d_ms = neural.backward(nets.pnets[k], p_cache, d)
        sw, sb, _ = neural.backward(nets.snet, s_cache, d_ms)
        for acc, g in zip(s_dw + s_db, sw + sb):
            acc += g
        pending.append((p_dw, p_db))
        losses.append(loss)
    for k, grads in enumerate(pending):
        neural.adam_step(nets.pnets[k], grads, nets.pnet_opts[k])
    neural.adam_step(nets.snet, (s_dw, s_db), nets.snet_opt)
    return losses


def run_round_collab(groups: dict[str, CollabNets], envs: Sequence[Environment], profiles: Sequence[Profile],
                     beta: float, rng: np.random.Generator, seeds: Sequence[int] | None = None,
                     sampled: Sequence[np.ndarray] | None = None, learn: bool = True) -> CollabLog:
    """One round over all services.

    ``groups`` maps an action kind to its CollabNets; with both kinds
    present, each service's two agents act independently on the rule state
    and only same-kind agents share an SNet.
    """
    n = len(envs)
    if len(profiles) != n or any(g.n_services != n for g in groups.values()):
        raise ValidationError("services, profiles and PNets must have the same count")
    if not groups or set(groups) - set(KIND_FIELD):
        raise ValidationError("collab groups must be keyed by 'thread' and/or 'call'")
    if beta < 0 or not np.isfinite(beta):
        raise ValidationError(f"beta must be finite and >= 0, got {beta}")
    seeds = list(seeds) if seeds is not None else [0] * n
    if sampled is None:
        sampled = [sample_inputs(p, rng) for p in profiles]
    kinds = [k for k in ("thread", "call") if k in groups]
    steps = []
    for svc in range(n):
        values = dict(zip(INPUT_FIELDS, sampled[svc]))
        states, acts, chosen = {}, {}, {}
        for kind in kinds:
            g = groups[kind]
            states[kind] = state_from(values, g.state_fields)
            acts[kind] = select_action(q_values(g, states[kind], svc), g.epsilon, g.rng)
            chosen[g.space.field] = g.space.values[acts[kind]]
        fixed = [f for f in INPUT_FIELDS if f not in chosen]
        i_t = concat_input(state_from(values, fixed), chosen, fixed)
        qps, p503 = envs[svc](i_t[None, :], [seeds[svc]])[0]
        steps.append(StepLog(i_t, acts, states, float(qps), float(p503), 0.0))
    all_q = [s.qps for s in steps]
    all_p = [s.p503 for s in steps]
    rewards = [reward_multi(k + 1, all_q, all_p, beta) for k in range(n)]
    for s, r in zip(steps, rewards):
        s.reward = r
    if learn:
        for kind in kinds:
            losses = collab_update(groups[kind], [s.states[kind] for s in steps],
                                   [s.actions[kind] for s in steps], rewards)
            for s, l in zip(steps, losses):
                s.losses[kind] = l
    return CollabLog(steps, rewards)


def snet_aux_update(nets: CollabNets, buffer: Sequence[tuple], enabled: bool = True) -> float:
    """One Adam step fitting next states from (state, SNet(state)) through a linear head.

    ``buffer`` holds ``(s_t, ms_t, s_next)`` triples; ms is recomputed from
    s_t so the gradient reaches the SNet parameters.
    """
    if not enabled:
        return 0.0
    if not buffer:
        raise ValidationError("empty auxiliary buffer")
    if nets.aux_head is None or nets.aux_opt is None:
        raise ValidationError("collab nets were built without an auxiliary head")
    s = np.array([np.asarray(b[0], dtype=float) for b in buffer])
    s_next = np.array([np.asarray(b[2], dtype=float) for b in buffer])
    ms, s_cache = neural.forward(nets.snet, s)
    pred, h_cache = neural.forward(nets.aux_head, np.concatenate([s, ms], axis=1))
    loss, d = neural.mse(pred, s_next)
    h_dw, h_db, d_in = neural.backward(nets.aux_head, h_cache, d)
    sw, sb, _ = neural.backward(nets.snet, s_cache, d_in[:, nets.state_dim:])
    neural.adam_step(nets.aux_head, (h_dw, h_db), nets.aux_opt)
    neural.adam_step(nets.snet, (sw, sb), nets.snet_opt)
    return loss
