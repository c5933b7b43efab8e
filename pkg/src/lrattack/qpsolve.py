"""Dual accelerated projected gradient for box-constrained projections.

Solves ``min 1/2 ||z - x||^2  s.t.  A z <= b,  0 <= z <= 1`` through its
dual in ``(mu, alpha, beta)``.  Only ``mu`` is iterated; for fixed ``mu`` the
box multipliers have the closed form

    alpha = max(0, x - A^T mu - 1),   beta = max(0, A^T mu - x),

so the primal point attached to any ``mu`` is ``clip(x - A^T mu, 0, 1)``.
Any dual value is a lower bound on the optimum, which lets the caller
abandon a region as soon as the bound passes the incumbent.

The solver touches ``A`` only through ``apply_A`` / ``apply_AT`` (plus the
attributes ``b``, ``m`` and ``d``), so it runs unchanged on matrix-free
region systems and on dense test matrices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NumericError

logger = logging.getLogger(__name__)

IMPROVED = "improved"
PRUNED = "pruned_by_bound"
NOT_ADVERSARIAL = "not_adversarial"
ITERATION_LIMIT = "iteration_limit"


@dataclass
class QpConfig:
    max_iters: int = 500
    power_iters: int = 20
    lipschitz_safety: float = 1.1
    lipschitz_bound: str = "reduced"
    early_stop_bound: Optional[float] = None
    boundary_tol: float = 1e-5
    line_search_step: float = 1.02
    line_search_max_factor: float = 2.0
    divergence_factor: float = 1e6
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.lipschitz_safety <= 1:
            raise ValueError("lipschitz_safety must exceed 1")
        if self.lipschitz_bound not in ("reduced", "joint"):
            raise ValueError("lipschitz_bound must be 'reduced' or 'joint'")


@dataclass
class DualState:
    mu: np.ndarray
    mu_prev: np.ndarray
    at_mu: np.ndarray  # A^T mu, kept so A^T is applied once per step
    at_prev: np.ndarray
    step: float
    k: int = 0


@dataclass
class DualRun:
    """Outcome of the dual iteration alone."""

    mu: np.ndarray
    at_mu: np.ndarray
    z: np.ndarray
    dual_value: float
    best_dual: float
    iterations: int
    pruned: bool
    lipschitz: float
    trace: list = field(default_factory=list)


@dataclass
class QpResult:
    z: np.ndarray
    delta: np.ndarray
    status: str
    dual_bound: float
    primal_value: Optional[float]
    iterations: int


# --------------------------------------------------------------------------
# building blocks


def estimate_lipschitz(op, power_iters=20, safety=1.1, seed=0, bound="joint", return_norm=False):
    """Step-size bound from a power estimate ``lam`` of ``||A^T A||``.

    Runs ``power_iters`` steps of the power method on ``mu -> A A^T mu``
    from a fixed-seed start.  ``bound="joint"`` returns
    ``safety * max(lam**2, lam, 1)``, valid for the gradient in all of
    ``(mu, alpha, beta)``.  ``bound="reduced"`` returns
    ``safety * max(lam, 1)``: with ``alpha, beta`` eliminated the gradient
    in ``mu`` is ``A clip(x - A^T mu) - b``, whose Lipschitz constant is
    ``||A A^T||``.  The solver uses the reduced bound.
    """
    if op.m == 0:
        lam = 0.0
    else:
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(op.m)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(power_iters):
            w = np.asarray(op.apply_A(op.apply_AT(v)), dtype=np.float64)
            lam = float(np.linalg.norm(w))
            if lam == 0.0:
                break
            v = w / lam
    if bound == "joint":
        L = safety * max(lam * lam, lam, 1.0)
    else:
        L = safety * max(lam, 1.0)
    return (L, lam) if return_norm else L


def optimal_alpha_beta(at_mu, x):
    """Closed-form box multipliers for given ``A^T mu``."""
    return np.maximum(0, x - at_mu - 1), np.maximum(0, at_mu - x)


def dual_objective(mu, alpha, beta, x, b, at_mu):
    s = at_mu + alpha - beta
    return float(-0.5 * s @ s + s @ x - alpha.sum() - mu @ b)


def grad_mu(op, at_mu, alpha, beta, x, b):
    """``-A A^T mu + A (x - alpha + beta) - b``."""
    return op.apply_A(x - at_mu - alpha + beta) - b


def primal_point(at_mu, x):
    return np.clip(x - at_mu, 0, 1)


# --------------------------------------------------------------------------
# solver


def solve_dual(op, x, cfg=None, bound=None, lipschitz=None, record=False):
    """Accelerated projected gradient ascent on the dual.

    Stops early when the dual value exceeds ``bound`` (a value of the
    1/2-scaled objective).  With ``record`` the dual value after every
    step is kept in ``trace``.
    """
    cfg = cfg or QpConfig()
    if bound is None:
        bound = cfg.early_stop_bound
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    b = np.asarray(op.b, dtype=np.float64)
    L = lipschitz if lipschitz is not None else estimate_lipschitz(
        op, cfg.power_iters, cfg.lipschitz_safety, cfg.seed, cfg.lipschitz_bound)
    zero = np.zeros(op.m)
    st = DualState(zero, zero, np.zeros_like(x), np.zeros_like(x), 1.0 / L)
    guard = None if bound is None else cfg.divergence_factor * max(bound, 1e-12)
    trace = []
    best = -np.inf
    q = 0.0
    pruned = False
    for k in range(1, cfg.max_iters + 1):
        w = (k - 1) / (k + 2)
        mu_e = st.mu + w * (st.mu - st.mu_prev)
        at_e = st.at_mu + w * (st.at_mu - st.at_prev)
        # alpha, beta at the extrapolated point collapse the primal to a clip
        g = np.asarray(op.apply_A(primal_point(at_e, x)), dtype=np.float64) - b
        mu_new = np.maximum(0.0, mu_e + st.step * g)
        at_new = np.asarray(op.apply_AT(mu_new), dtype=np.float64)
        st.mu_prev, st.at_prev = st.mu, st.at_mu
        st.mu, st.at_mu, st.k = mu_new, at_new, k
        alpha, beta = optimal_alpha_beta(at_new, x)
        q = dual_objective(mu_new, alpha, beta, x, b, at_new)
        if not np.isfinite(q):
            raise NumericError(f"non-finite dual value at iteration {k}: mu range "
                               f"[{mu_new.min():.3g}, {mu_new.max():.3g}]")
        best = max(best, q)
        if record:
            trace.append(q)
        if bound is not None and (q > bound or q > guard):
            pruned = True
            break
    return DualRun(st.mu, st.at_mu, primal_point(st.at_mu, x), q, best, st.k, pruned, L, trace)


def _line_search(sys, x, z, limit, cfg):
    step = z - x
    base = float(np.linalg.norm(step))
    if base == 0.0:
        return None
    a = 1.0
    while a * base < limit:
        za = np.clip(x + a * step, 0, 1)
        if float(np.linalg.norm(za - x)) < limit and sys.is_success(za):
            return za
        a *= cfg.line_search_step
    return None


def solve_qp(sys, x, incumbent_sq_half=None, cfg=None, lipschitz=None):
    """Solve one region subproblem and recover an adversarial point.

    ``incumbent_sq_half`` is ``1/2 * u**2`` for the incumbent norm ``u``.
    Status is ``pruned_by_bound`` if the dual bound proved no improvement is
    possible, ``improved`` if a shorter adversarial point was found,
    ``iteration_limit`` if the recovered point is adversarial but not
    shorter, and ``not_adversarial`` otherwise.
    """
    cfg = cfg or QpConfig()
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    run = solve_dual(sys, x, cfg, bound=incumbent_sq_half, lipschitz=lipschitz)
    if run.pruned:
        return QpResult(run.z, run.z - x, PRUNED, run.best_dual, None, run.iterations)
    z = run.z
    norm = float(np.linalg.norm(z - x))
    limit = np.inf if incumbent_sq_half is None else float(np.sqrt(2.0 * incumbent_sq_half))
    if not np.isfinite(limit):
        limit = cfg.line_search_max_factor * max(norm, 1e-12)
    if sys.decision_violation(z) <= cfg.boundary_tol and sys.is_success(z):
        status = IMPROVED if norm < limit else ITERATION_LIMIT
        return QpResult(z, z - x, status, run.best_dual, 0.5 * norm * norm, run.iterations)
    za = _line_search(sys, x, z, limit, cfg)
    if za is not None:
        n = float(np.linalg.norm(za - x))
        return QpResult(za, za - x, IMPROVED, run.best_dual, 0.5 * n * n, run.iterations)
    return QpResult(z, z - x, NOT_ADVERSARIAL, run.best_dual, 0.5 * norm * norm, run.iterations)
