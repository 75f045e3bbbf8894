"""Discrete-event simulator of a circuit-breaker-protected service.

A closed-loop load generator (``threads`` workers sharing ``calls`` requests)
drives a small pool of backend replicas through an Envoy-style sidecar:

* a connection pool of ``max_connections`` slots with a FIFO pending queue
  of ``max_pending_requests``; overflow resolves 503 immediately,
* connections are recycled after ``max_requests_per_connection`` requests
  (re-establishing one costs ``connect_ms``),
* least-loaded routing over non-ejected replicas,
* periodic outlier detection that ejects replicas with too many
  consecutive 503s.

``simulate`` is a pure function of its arguments: identical inputs give a
bit-identical :class:`ServiceResponse`.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ValidationError

# event kinds; system events sort before worker events at equal timestamps
_RETURN = 0
_SWEEP = 1
_DONE = 2


def _check_int(name: str, value, lo: int) -> None:
    if isinstance(value, bool) or not float(value).is_integer():
        raise ValidationError(f"{name} must be an integer, got {value!r}")
    if value < lo:
        raise ValidationError(f"{name} must be >= {lo}, got {value!r}")


def _check_real(name: str, value, lo: float, hi: float = math.inf, strict: bool = False) -> None:
    v = float(value)
    if not math.isfinite(v):
        raise ValidationError(f"{name} must be finite, got {value!r}")
    if v < lo or (strict and v == lo) or v > hi:
        raise ValidationError(f"{name} out of range, got {value!r}")


@dataclass(frozen=True)
class TrafficRules:
    max_pending_requests: int
    max_connections: int
    max_requests_per_connection: int
    ejection_time: float
    max_ejection_pct: float
    interval_time: float
    consecutive_errors: int

    def validate(self) -> None:
        _check_int("max_pending_requests", self.max_pending_requests, 0)
        _check_int("max_connections", self.max_connections, 1)
        _check_int("max_requests_per_connection", self.max_requests_per_connection, 1)
        _check_real("ejection_time", self.ejection_time, 0.0, strict=True)
        _check_real("max_ejection_pct", self.max_ejection_pct, 0.0, 100.0)
        _check_real("interval_time", self.interval_time, 0.0, strict=True)
        _check_int("consecutive_errors", self.consecutive_errors, 1)

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, f.name) for f in fields(self))


@dataclass(frozen=True)
class LoadAction:
    threads: int
    calls: int

    def validate(self) -> None:
        _check_int("threads", self.threads, 1)
        _check_int("calls", self.calls, 1)
        if self.calls < self.threads:
            raise ValidationError(
                f"calls must be >= threads, got calls={self.calls} threads={self.threads}"
            )


@dataclass(frozen=True)
class ServiceResponse:
    qps: float
    p200: float
    p503: float


@dataclass(frozen=True)
class BackendConfig:
    replicas: int = 3
    base_latency_ms: float = 20.0
    latency_sigma: float = 0.5
    base_fault_prob: float = 0.05
    overload_slope: float = 0.8
    per_replica_capacity: int = 8
    latency_congestion_coeff: float = 0.1
    connect_ms: float = 2.0

    def validate(self) -> None:
        _check_int("replicas", self.replicas, 1)
        _check_real("base_latency_ms", self.base_latency_ms, 0.0, strict=True)
        _check_real("latency_sigma", self.latency_sigma, 0.0)
        _check_real("base_fault_prob", self.base_fault_prob, 0.0, 1.0)
        _check_real("overload_slope", self.overload_slope, 0.0)
        _check_int("per_replica_capacity", self.per_replica_capacity, 1)
        _check_real("latency_congestion_coeff", self.latency_congestion_coeff, 0.0)
        _check_real("connect_ms", self.connect_ms, 0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackendConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown backend fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def error_probability(inflight: int, cfg: BackendConfig) -> float:
    """Failure probability of a request landing on a replica with ``inflight`` requests."""
    cap = cfg.per_replica_capacity
    p = cfg.base_fault_prob + cfg.overload_slope * max(0, inflight - cap) / cap
    return min(max(p, 0.0), 1.0)


def max_ejected(replicas: int, pct: float) -> int:
    # small slack so 100% of 3 is 3, not 2 from rounding
    return int(math.floor(replicas * pct / 100.0 + 1e-9))


def simulate(rules: TrafficRules, load: LoadAction, cfg: BackendConfig, seed: int) -> ServiceResponse:
    rules.validate()
    load.validate()
    cfg.validate()

    calls = int(load.calls)
    threads = int(load.threads)
    max_conn = int(rules.max_connections)
    max_pending = int(rules.max_pending_requests)
    max_rpc = int(rules.max_requests_per_connection)
    interval = float(rules.interval_time)
    eject_for = float(rules.ejection_time)
    threshold = int(rules.consecutive_errors)
    eject_cap = max_ejected(cfg.replicas, rules.max_ejection_pct)
    n_rep = int(cfg.replicas)

    # at most one dispatch per call, so the random streams can be drawn up front
    rng = np.random.Generator(np.random.PCG64(seed & 0xFFFFFFFFFFFFFFFF))
    normals = rng.standard_normal(calls)
    uniforms = rng.random(calls)
    mu = math.log(cfg.base_latency_ms) - 0.5 * cfg.latency_sigma**2
    sigma = cfg.latency_sigma
    connect_s = cfg.connect_ms / 1000.0
    congestion = cfg.latency_congestion_coeff
    n_draw = 0

    remaining = calls
    n200 = 0
    n503 = 0
    last_t = 0.0

    idle_slots = list(range(max_conn))  # heap of idle connection slots
    slot_served = [0] * max_conn
    active = 0
    pending: deque[int] = deque()

    inflight = [0] * n_rep
    consec = [0] * n_rep
    ejected = [False] * n_rep
    n_ejected = 0

    events: list[tuple] = []
    seq = 0
    outstanding = 0  # completion events in the heap

    def push(t: float, worker: int, kind: int, payload) -> None:
        nonlocal seq
        heapq.heappush(events, (t, worker, kind, seq, payload))
        seq += 1

    def pick_replica() -> int:
        best = -1
        for r in range(n_rep):
            if not ejected[r] and (best < 0 or inflight[r] < inflight[best]):
                best = r
        return best

    def dispatch(w: int, t: float) -> bool:
        """Send worker w's admitted request. Returns False if it failed instantly."""
        nonlocal active, n503, last_t, n_draw, outstanding
        r = pick_replica()
        if r < 0:
            n503 += 1
            last_t = max(last_t, t)
            return False
        slot = heapq.heappop(idle_slots)
        active += 1
        inflight[r] += 1
        k = n_draw
        n_draw += 1
        latency = math.exp(mu + sigma * normals[k]) / 1000.0 * (1.0 + congestion * inflight[r])
        if slot_served[slot] == 0:
            latency += connect_s
        fail = uniforms[k] < error_probability(inflight[r], cfg)
        push(t + latency, w, _DONE, (slot, r, fail))
        outstanding += 1
        return True

    def issue(w: int, t: float) -> None:
        # a worker keeps issuing at time t until one request is in flight or queued
        nonlocal remaining, n503, last_t
        while remaining > 0:
            remaining -= 1
            if active < max_conn:
                if dispatch(w, t):
                    return
            elif len(pending) < max_pending:
                pending.append(w)
                return
            else:
                n503 += 1
                last_t = max(last_t, t)

    for w in range(threads):
        issue(w, 0.0)
    if outstanding:
        push(interval, -1, _SWEEP, None)

    while events and outstanding:
        t, w, kind, _, payload = heapq.heappop(events)
        if kind == _DONE:
            outstanding -= 1
            slot, r, fail = payload
            inflight[r] -= 1
            slot_served[slot] += 1
            if slot_served[slot] >= max_rpc:
                slot_served[slot] = 0
            active -= 1
            heapq.heappush(idle_slots, slot)
            if fail:
                n503 += 1
                consec[r] += 1
            else:
                n200 += 1
                consec[r] = 0
            last_t = t
            while pending and active < max_conn:
                w2 = pending.popleft()
                if not dispatch(w2, t):
                    issue(w2, t)
            issue(w, t)
        elif kind == _SWEEP:
            for r in range(n_rep):
                if not ejected[r] and consec[r] >= threshold and n_ejected < eject_cap:
                    ejected[r] = True
                    n_ejected += 1
                    consec[r] = 0
                    push(t + eject_for, -1, _RETURN, r)
            push(t + interval, -1, _SWEEP, None)
        else:
            ejected[payload] = False
            n_ejected -= 1

    assert n200 + n503 == calls
    p503 = n503 / calls
    return ServiceResponse(qps=calls / last_t, p200=1.0 - p503, p503=p503)
