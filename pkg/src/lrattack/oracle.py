"""Ground truth for small problems.

* :func:`dense_materialize` recovers the rows of a matrix-free system as
  ``a_i = A^T e_i``.
* :func:`reference_qp` solves the box-constrained projection exactly with
  a dual active-set method that shares nothing with the gradient solver.
* :func:`exact_min_perturbation` enumerates every activation pattern of a
  tiny network and returns the globally minimal adversarial perturbation.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import quadprog

from .errors import ConfigError
from .net import MaxPool2d, ReLU, ActivationPattern, forward
from .region import Decision, build_from_pattern

logger = logging.getLogger(__name__)

MAX_DENSE_ENTRIES = 10**7
MAX_PATTERN_BITS = 16


@dataclass
class DenseSystem:
    """Explicit ``A z <= b``; shares the operator interface of region systems."""

    A: np.ndarray
    b: np.ndarray
    tags: list = field(default_factory=list)

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        self.A = np.asarray(self.A, dtype=np.float64)
        if self.A.ndim != 2:
            self.A = self.A.reshape(len(self.b), -1)

    @property
    def m(self):
        return self.A.shape[0]

    @property
    def d(self):
        return self.A.shape[1]

    def apply_A(self, z):
        return np.asarray(z, dtype=np.float64) @ self.A.T

    def apply_AT(self, mu):
        return np.asarray(mu, dtype=np.float64) @ self.A


def dense_materialize(sys, scaled=True):
    """Materialise a matrix-free region system row by row."""
    if sys.m * sys.d > MAX_DENSE_ENTRIES:
        raise ConfigError(f"system of {sys.m}x{sys.d} is too large to materialise")
    eye = np.eye(sys.m, dtype=sys.net.dtype)
    A = sys.apply_AT(eye, scaled=scaled) if sys.m else np.zeros((0, sys.d))
    b = sys.b if scaled else sys.b_raw
    tags = [(r["layer"], r["kind"], r["index"]) for r in sys.row_info()]
    return DenseSystem(np.asarray(A, dtype=np.float64), np.asarray(b, dtype=np.float64), tags)


@dataclass
class ReferenceResult:
    z: np.ndarray
    feasible: bool
    mu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    kkt: float
    value: float = np.inf  # optimal 1/2 ||z - x||^2


def kkt_residual(dense, x, z, mu, alpha, beta):
    """Largest violation of stationarity, feasibility and complementarity."""
    A, b = dense.A, dense.b
    slack = A @ z - b
    res = [
        np.abs(z - x + A.T @ mu + alpha - beta).max(initial=0.0),
        slack.max(initial=0.0),
        max(0.0, -z.min(initial=0.0)),
        max(0.0, z.max(initial=0.0) - 1.0),
        np.abs(mu * slack).max(initial=0.0),
        np.abs(alpha * (z - 1.0)).max(initial=0.0),
        np.abs(beta * z).max(initial=0.0),
        max(0.0, -min(mu.min(initial=0.0), alpha.min(initial=0.0), beta.min(initial=0.0))),
    ]
    return float(max(res))


def reference_qp(dense, x):
    """Exact ``argmin 1/2 ||z - x||^2  s.t.  A z <= b, 0 <= z <= 1``.

    Uses the Goldfarb-Idnani dual active-set method, which terminates in
    finitely many steps with the exact optimum and its multipliers, or
    reports that the constraints are inconsistent.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d, m = x.size, dense.m
    G = np.vstack([dense.A, np.eye(d), -np.eye(d)])
    h = np.concatenate([dense.b, np.ones(d), np.zeros(d)])
    try:
        z, _, _, _, lam, _ = quadprog.solve_qp(np.eye(d), x, -G.T, -h)
    except ValueError:
        return ReferenceResult(np.full(d, np.nan), False, np.zeros(m), np.zeros(d), np.zeros(d), np.inf)
    mu, alpha, beta = lam[:m], lam[m:m + d], lam[m + d:]
    y = z - x
    return ReferenceResult(z, True, mu, alpha, beta, kkt_residual(dense, x, z, mu, alpha, beta), 0.5 * float(y @ y))


# --------------------------------------------------------------------------
# exhaustive enumeration


def _layer_states(net, k):
    layer = net.layers[k]
    n_in = net.shapes[k]
    if isinstance(layer, ReLU):
        n = int(np.prod(n_in))
        for bits in itertools.product((1, -1), repeat=n):
            yield np.array(bits, dtype=np.int8)
    else:
        pools = layer.pools(n_in)
        for choice in itertools.product(*[tuple(p) for p in pools]):
            yield np.array(choice, dtype=np.int64)


def pattern_bits(net):
    bits = 0.0
    for k in net.pattern_layers:
        layer = net.layers[k]
        if isinstance(layer, ReLU):
            bits += int(np.prod(net.shapes[k]))
        else:
            assert isinstance(layer, MaxPool2d)
            bits += layer.pools(net.shapes[k]).shape[0] * np.log2(layer.window ** 2)
    return bits


@dataclass
class ExactResult:
    delta: np.ndarray
    norm: float
    adv_class: int
    regions_feasible: int


def exact_min_perturbation(net, x, scale=False, kappa=1.0):
    """Globally minimal L2 adversarial perturbation by full enumeration.

    Patterns are grown one pattern layer at a time; a partial pattern whose
    rows are already infeasible prunes its whole subtree.
    """
    bits = pattern_bits(net)
    if bits > MAX_PATTERN_BITS:
        raise ConfigError(f"network has {bits:g} pattern bits, at most {MAX_PATTERN_BITS} allowed")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    logits, _ = forward(net, x)
    c = int(np.argmax(logits))
    n_layers = len(net.pattern_layers)
    defaults = [next(_layer_states(net, k)) for k in net.pattern_layers]
    best = (np.inf, None, None)
    seen = [0]

    def visit(prefix):
        t = len(prefix)
        states = list(prefix) + defaults[t:]
        pattern = ActivationPattern.build(net, states)
        if t:
            sys = build_from_pattern(net, pattern, None, kappa, scale, max_blocks=t)
            if not reference_qp(dense_materialize(sys), x).feasible:
                return
        if t < n_layers:
            for st in _layer_states(net, net.pattern_layers[t]):
                visit(prefix + [st])
            return
        nonlocal best
        seen[0] += 1
        for other in range(net.num_classes):
            if other == c:
                continue
            sys = build_from_pattern(net, pattern, Decision(c, other=other), kappa, scale)
            res = reference_qp(dense_materialize(sys), x)
            if res.feasible:
                n = float(np.linalg.norm(res.z - x))
                if n < best[0]:
                    best = (n, res.z - x, other)

    visit([])
    norm, delta, other = best
    if delta is None:
        raise ConfigError("no adversarial region exists for this input")
    logits_adv, _ = forward(net.astype(np.float64), x + delta)
    margin = np.delete(logits_adv, c).max() - logits_adv[c]
    if margin < -1e-6 * max(1.0, np.abs(logits_adv).max()):
        raise ConfigError(f"oracle optimum is not adversarial (margin {margin:.3g})")
    return ExactResult(delta, norm, other, seen[0])
