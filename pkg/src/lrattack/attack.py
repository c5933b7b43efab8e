"""Randomized local search over linear regions.

For every starting perturbation the search keeps the shortest adversarial
perturbation found so far, samples a point near the current boundary point
``x + delta`` (biased towards ``x``), and solves the region subproblem of
the sampled point unless its activation pattern was already visited.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import AttackError, ConfigError
from .net import classify, classify_batch, forward, pattern_of
from .qpsolve import IMPROVED, PRUNED, QpConfig, solve_qp
from .region import Decision, build_region

logger = logging.getLogger(__name__)

POLICIES = ("nearest-margin", "all-classes")


@dataclass
class AttackConfig:
    n_regions: int = 500
    n_starts: int = 5
    q: float = 0.8
    gamma: float = 6.0
    seed: int = 0
    kappa: float = 10.0
    qp: QpConfig = field(default_factory=QpConfig)
    policy: str = "nearest-margin"
    target: Optional[int] = None
    share_cache: bool = False

    def __post_init__(self):
        if not 0.5 <= self.q <= 1.0:
            raise ConfigError("q must lie in [0.5, 1]")
        if self.gamma < 1:
            raise ConfigError("gamma must be at least 1")
        if self.n_regions < 1 or self.n_starts < 1:
            raise ConfigError("n_regions and n_starts must be positive")
        if self.kappa <= 0:
            raise ConfigError("kappa must be positive")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}")


@dataclass
class AttackState:
    x: np.ndarray
    c: int
    delta: np.ndarray
    u: float
    visited: set = field(default_factory=set)
    regions_solved: int = 0
    cache_hits: int = 0
    pruned: int = 0
    improved: int = 0


@dataclass
class StartRun:
    start_norm: float
    delta: np.ndarray
    norm: float
    trace: np.ndarray
    regions_solved: int
    cache_hits: int
    pruned: int
    improved: int


@dataclass
class AttackResult:
    c: int
    delta: np.ndarray
    norm: float
    trace: np.ndarray  # best norm over starts after each sampled region
    starts: list
    wall_time: float = 0.0

    @property
    def regions_solved(self):
        return sum(s.regions_solved for s in self.starts)

    @property
    def cache_hits(self):
        return sum(s.cache_hits for s in self.starts)

    @property
    def pruned(self):
        return sum(s.pruned for s in self.starts)


# --------------------------------------------------------------------------
# starting points


def _bisect(net, x, z, is_adv, halvings=30, rel_tol=1e-5):
    # invariant: x + lo (z - x) is not adversarial, x + hi (z - x) is
    lo, hi = 0.0, 1.0
    for _ in range(halvings):
        if hi - lo < rel_tol:
            break
        mid = 0.5 * (lo + hi)
        if is_adv(x + mid * (z - x)):
            hi = mid
        else:
            lo = mid
    return x + hi * (z - x)


def find_starting_points(net, x, c, train_x, train_y, n_starts, train_pred=None, target=None):
    """Initial adversarial perturbations from nearby training points.

    Classes are ranked by the logits at ``x``; for each of the next
    ``n_starts`` classes the closest training point of that class that the
    network also assigns to it is bisected against ``x``.  Returns a list
    of ``(delta, class)`` pairs.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    tx = np.asarray(train_x, dtype=np.float64).reshape(len(train_x), -1)
    ty = np.asarray(train_y)
    if train_pred is None:
        train_pred = classify_batch(net, tx)
    if target is None:
        logits, _ = forward(net, x)
        ranking = [int(r) for r in np.argsort(-logits, kind="stable") if r != c][:n_starts]

        def is_adv(p):
            return classify(net, p) != c
    else:
        ranking = [int(target)]

        def is_adv(p):
            return classify(net, p) == target

    dist = np.linalg.norm(tx - x, axis=1)
    starts = []
    for cls in ranking:
        ok = np.flatnonzero((ty == cls) & (train_pred == cls))
        if ok.size == 0:
            logger.warning("no correctly classified training point of class %d", cls)
            continue
        z = tx[ok[np.argmin(dist[ok])]]
        u = _bisect(net, x, z, is_adv)
        starts.append((u - x, cls))
    if not starts and target is None:
        wrong = np.flatnonzero(train_pred != c)
        if wrong.size:
            z = tx[wrong[np.argmin(dist[wrong])]]
            u = _bisect(net, x, z, is_adv)
            starts.append((u - x, int(classify(net, u))))
    if not starts:
        raise AttackError("no starting point")
    return starts


# --------------------------------------------------------------------------
# sampling


def sample_direction(rng, delta, q, gamma):
    """Draw ``(direction, radius, theta)`` around the boundary point.

    ``direction`` is a unit vector rotated by ``theta`` from a random
    direction orthogonal to ``delta`` towards ``-delta``; positive
    ``theta`` (probability ``q``) leans towards the original input.
    """
    norm = float(np.linalg.norm(delta))
    if norm == 0.0:
        raise AttackError("zero perturbation: the input is already misclassified")
    unit = delta / norm
    g = rng.standard_normal(delta.size)
    g -= (g @ unit) * unit
    g -= (g @ unit) * unit  # second pass: the first cancels badly when g is nearly parallel to delta
    perp = g / np.linalg.norm(g)
    sign = 1.0 if rng.random() < q else -1.0
    theta = sign * rng.uniform(0.0, np.pi)
    direction = np.cos(theta) * perp - np.sin(theta) * unit
    radius = norm * rng.random() ** gamma
    return direction, radius, theta


def sample_candidate(rng, x, delta, q, gamma):
    """Next point ``x + delta + r * direction`` (not clipped to the box)."""
    direction, radius, _ = sample_direction(rng, delta, q, gamma)
    return x + delta + radius * direction


# --------------------------------------------------------------------------
# search


def _decisions(cfg, c, logits):
    if cfg.target is not None:
        return [Decision(c, target=cfg.target)]
    others = [l for l in range(logits.size) if l != c]
    if cfg.policy == "all-classes":
        return [Decision(c, other=l) for l in others]
    margins = logits[c] - logits[others]
    return [Decision(c, other=others[int(np.argmin(margins))])]


def _run_start(net, x, c, delta, cfg, rng, visited):
    st = AttackState(x, c, delta, float(np.linalg.norm(delta)), visited)
    trace = [st.u]
    start_norm = st.u
    for _ in range(cfg.n_regions):
        y = np.clip(sample_candidate(rng, x, st.delta, cfg.q, cfg.gamma), 0.0, 1.0)
        logits, acts = forward(net, y)
        pat = pattern_of(acts)
        if pat in st.visited:
            st.cache_hits += 1
            trace.append(st.u)
            continue
        st.visited.add(pat)
        for dec in _decisions(cfg, c, logits):
            sys = build_region(net, y, dec, cfg.kappa, acts=acts)
            res = solve_qp(sys, x, 0.5 * st.u * st.u, cfg.qp)
            st.regions_solved += 1
            if res.status == PRUNED:
                st.pruned += 1
            elif res.status == IMPROVED:
                n = float(np.linalg.norm(res.delta))
                if n < st.u:
                    st.delta, st.u = res.delta, n
                    st.improved += 1
        trace.append(st.u)
    return StartRun(start_norm, st.delta, st.u, np.array(trace), st.regions_solved,
                    st.cache_hits, st.pruned, st.improved)


def attack_point(net, x, train_x, train_y, cfg=None, point_index=0, train_pred=None):
    """Search for the smallest L2 adversarial perturbation of ``x``."""
    cfg = cfg or AttackConfig()
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    c = classify(net, x)
    n_starts = cfg.n_starts
    if n_starts > net.num_classes - 1:
        logger.info("n_starts %d capped at %d classes", n_starts, net.num_classes - 1)
        n_starts = net.num_classes - 1
    starts = find_starting_points(net, x, c, train_x, train_y, n_starts, train_pred, cfg.target)
    shared = set()
    runs = []
    for s, (delta, _) in enumerate(starts):
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(point_index, s)))
        visited = shared if cfg.share_cache else set()
        runs.append(_run_start(net, x, c, delta, cfg, rng, visited))
    best = min(runs, key=lambda r: r.norm)
    trace = np.min(np.stack([r.trace for r in runs]), axis=0)
    return AttackResult(c, best.delta, best.norm, trace, runs, time.perf_counter() - t0)


def trace_statistics(results):
    """Median, mean and max of the norm traces across points, per step."""
    traces = np.stack([np.asarray(r.trace if isinstance(r, AttackResult) else r, dtype=np.float64)
                       for r in results])
    return {
        "median": np.median(traces, axis=0),
        "mean": traces.mean(axis=0),
        "max": traces.max(axis=0),
    }
