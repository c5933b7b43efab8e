"""Matrix-free constraint systems ``A z <= b`` for one linear region.

Rows come in blocks.  A block reads one network output ``k`` (through the
frozen affine map ``V_k z + v_k``) and forms signed selections of it:

* ReLU rows: ``-s_r (V_k z + v_k)_r <= 0`` with ``s_r`` the anchor sign,
* max-pool rows: ``(V_k z + v_k)_i - (V_k z + v_k)_p <= 0`` for every pool
  member ``i`` other than the pool's anchor argmax ``p``,
* decision rows on the logits, e.g. ``f_c - f_l <= 0`` for an untargeted
  attack against class ``c`` towards ``l``.

``apply_A`` is one frozen forward sweep and ``apply_AT`` one reverse sweep
with the row weights injected at every attachment point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import ConfigError
from .net import (
    MaxPool2d,
    ReLU,
    affine_offsets,
    classify,
    forward,
    frozen_forward,
    frozen_jvp,
    frozen_vjp,
    pattern_of,
)


@dataclass(frozen=True)
class Decision:
    """Which decision rows to add.

    Untargeted: ``target`` is None and ``other`` is the class ``l`` whose
    logit must reach the logit of ``c``.  Targeted: ``target`` is ``s`` and
    one row per class ``r != s`` demands ``f_s >= f_r``.
    """

    c: int
    other: Optional[int] = None
    target: Optional[int] = None

    def __post_init__(self):
        if (self.other is None) == (self.target is None):
            raise ConfigError("give exactly one of 'other' (untargeted) or 'target'")
        cls = self.other if self.target is None else self.target
        if cls == self.c:
            raise ConfigError(f"decision class {cls} equals the predicted class")

    def rows(self, num_classes):
        if self.target is None:
            return np.array([self.c]), np.array([self.other])
        others = np.array([r for r in range(num_classes) if r != self.target])
        return others, np.full(others.size, self.target)

    def is_success(self, pred):
        if self.target is None:
            return pred != self.c
        return pred == self.target


@dataclass(frozen=True)
class Block:
    kind: str  # 'relu' | 'maxpool' | 'decision'
    layer: int  # position in net.layers; len(net.layers) for decision rows
    attach: int  # output index the rows read
    start: int
    pos: np.ndarray
    coef: np.ndarray
    neg: Optional[np.ndarray] = None

    @property
    def size(self):
        return self.pos.size

    @property
    def stop(self):
        return self.start + self.size

    def rows(self, t):
        """Row values for batched flat outputs ``t`` of shape (B, n)."""
        r = t[:, self.pos] * self.coef
        if self.neg is not None:
            r = r - t[:, self.neg]
        return r

    def rows_t(self, w, n):
        """Cotangent on the attached output for row weights ``w`` (B, size)."""
        if self.neg is None:
            idx = self.pos
            vals = w * self.coef
        else:
            idx = np.concatenate([self.pos, self.neg])
            vals = np.concatenate([w * self.coef, -w], axis=1)
        return K.scatter_add(vals, idx, n)


def _pattern_blocks(net, pattern):
    blocks = []
    start = 0
    for (kind, k), state in zip(pattern.layer_kinds, pattern.states()):
        layer = net.layers[k]
        if kind == "relu":
            assert isinstance(layer, ReLU)
            pos = np.arange(state.size)
            coef = -state.astype(net.dtype)
            blk = Block("relu", k, k, start, pos, coef)
        else:
            assert isinstance(layer, MaxPool2d)
            pools = layer.pools(net.shapes[k])
            keep = pools != state[:, None]
            pos = pools[keep]
            neg = np.broadcast_to(state[:, None], pools.shape)[keep]
            blk = Block("maxpool", k, k, start, pos, np.ones(pos.size, dtype=net.dtype), neg)
        blocks.append(blk)
        start = blk.stop
    return blocks, start


class RegionSystem:
    """Rows of one region plus optional decision rows, with row scaling.

    All vectors are flat: ``apply_A`` maps (d,) or (B, d) to (m,) or (B, m)
    and ``apply_AT`` the reverse.  ``b`` and the products include the row
    scaling; pass ``scaled=False`` for the raw rows.
    """

    def __init__(self, net, pattern, offsets, decision=None, kappa=10.0, anchor=None, max_blocks=None):
        self.net = net
        self.pattern = pattern
        self.offsets = [np.asarray(v).reshape(-1) for v in offsets]
        self.decision = decision
        self.kappa = float(kappa)
        self.anchor = anchor
        blocks, m = _pattern_blocks(net, pattern)
        if max_blocks is not None:
            # rows of the first pattern layers only depend on those layers
            blocks = blocks[:max_blocks]
            m = blocks[-1].stop if blocks else 0
        if decision is not None:
            pos, neg = decision.rows(net.num_classes)
            blocks.append(Block("decision", len(net.layers), len(net.layers), m, pos,
                                np.ones(pos.size, dtype=net.dtype), neg))
            m += pos.size
        self.blocks = tuple(blocks)
        self.m = m
        self.d = net.input_dim
        self.b_raw = np.concatenate(
            [-blk.rows(self.offsets[blk.attach][None])[0] for blk in self.blocks]
        ) if self.blocks else np.zeros(0, dtype=net.dtype)
        self.row_scale = np.ones(self.m, dtype=net.dtype)

    # ---- layout

    @property
    def b(self):
        return self.b_raw * self.row_scale

    @property
    def decision_rows(self):
        if self.blocks and self.blocks[-1].kind == "decision":
            return slice(self.blocks[-1].start, self.m)
        return slice(self.m, self.m)

    @property
    def region_rows(self):
        return slice(0, self.decision_rows.start)

    def row_info(self):
        """Per-row metadata (layer, kind, attached index) for debugging."""
        info = []
        for blk in self.blocks:
            for i in range(blk.size):
                info.append({"layer": blk.layer, "kind": blk.kind, "index": int(blk.pos[i]),
                             "scale": float(self.row_scale[blk.start + i])})
        return info

    # ---- products

    def apply_A(self, z, scaled=True):
        z = np.asarray(z, dtype=self.net.dtype)
        single = z.ndim == 1
        zb = z.reshape(-1, self.d)
        tang = frozen_jvp(self.net, self.pattern, zb.reshape((-1,) + self.net.input_shape))
        out = np.empty((zb.shape[0], self.m), dtype=self.net.dtype)
        for blk in self.blocks:
            t = tang[blk.attach].reshape(zb.shape[0], -1)
            out[:, blk.start:blk.stop] = blk.rows(t)
        if scaled:
            out *= self.row_scale
        return out[0] if single else out

    def apply_AT(self, mu, scaled=True):
        mu = np.asarray(mu, dtype=self.net.dtype)
        single = mu.ndim == 1
        mb = mu.reshape(-1, self.m)
        if scaled:
            mb = mb * self.row_scale
        cot = {}
        for blk in self.blocks:
            n = int(np.prod(self.net.shapes[blk.attach]))
            w = blk.rows_t(mb[:, blk.start:blk.stop], n)
            cot[blk.attach] = w if blk.attach not in cot else cot[blk.attach] + w
        if not cot:
            out = np.zeros((mb.shape[0], self.d), dtype=self.net.dtype)
        else:
            cot = {k: v.reshape((mb.shape[0],) + self.net.shapes[k]) for k, v in cot.items()}
            out = frozen_vjp(self.net, self.pattern, cot).reshape(mb.shape[0], self.d)
        return out[0] if single else out

    # ---- scaling and checks

    def estimate_row_scales(self, samples_per_layer=10, seed=0):
        """Per-block row scaling from a few sampled row norms.

        Region blocks get one common factor, the reciprocal mean norm of up
        to ``samples_per_layer`` sampled rows.  Decision rows are normalised
        exactly and then multiplied by ``kappa``.
        """
        rng = np.random.default_rng(seed)
        picks = []
        for blk in self.blocks:
            if blk.kind == "decision":
                sel = np.arange(blk.size)
            elif blk.size <= samples_per_layer:
                sel = np.arange(blk.size)
            else:
                sel = np.sort(rng.choice(blk.size, samples_per_layer, replace=False))
            picks.append(sel + blk.start)
        rows = np.concatenate(picks) if picks else np.zeros(0, dtype=int)
        scale = np.ones(self.m, dtype=np.float64)
        if rows.size:
            e = np.zeros((rows.size, self.m), dtype=self.net.dtype)
            e[np.arange(rows.size), rows] = 1
            norms = np.linalg.norm(self.apply_AT(e, scaled=False).astype(np.float64), axis=1)
            at = 0
            for blk, sel in zip(self.blocks, picks):
                nrm = norms[at:at + sel.size]
                at += sel.size
                if blk.kind == "decision":
                    safe = np.where(nrm < 1e-12, 1.0, nrm)
                    scale[blk.start:blk.stop] = self.kappa / safe
                else:
                    good = nrm[nrm >= 1e-12]
                    scale[blk.start:blk.stop] = 1.0 / good.mean() if good.size else 1.0
        self.row_scale = scale.astype(self.net.dtype)
        return self.row_scale

    def violations(self, z, scaled=True):
        return self.apply_A(z, scaled) - (self.b if scaled else self.b_raw)

    def membership(self, z, tol=1e-6):
        """``(inside, max region violation, max decision violation)``."""
        v = self.violations(z)
        reg = v[self.region_rows]
        dec = v[self.decision_rows]
        worst = float(reg.max()) if reg.size else -np.inf
        dworst = float(dec.max()) if dec.size else -np.inf
        return worst <= tol, worst, dworst

    def decision_violation(self, z):
        """Largest unscaled decision-row violation (``-inf`` without rows)."""
        v = self.violations(z, scaled=False)[self.decision_rows]
        return float(v.max()) if v.size else -np.inf

    def is_success(self, z):
        pred = classify(self.net, z)
        return self.decision.is_success(pred) if self.decision is not None else False


def build_region(net, x, decision=None, kappa=10.0, scale=True, acts=None, seed=0):
    """Constraint system of the linear region containing ``x``.

    ``decision`` is a :class:`Decision` (or None for the region alone).
    Reuses ``acts`` from an earlier forward pass at ``x`` when given.
    """
    if acts is None:
        _, acts = forward(net, x)
    pattern = pattern_of(acts)
    sys = RegionSystem(net, pattern, affine_offsets(net, acts), decision, kappa,
                       anchor=np.asarray(acts.outputs[0]).reshape(-1))
    if scale:
        sys.estimate_row_scales(seed=seed)
    return sys


def build_from_pattern(net, pattern, decision=None, kappa=10.0, scale=True, seed=0, max_blocks=None):
    """Region system of an arbitrary (possibly empty) activation pattern.

    ``max_blocks`` keeps only the rows of the first pattern layers.
    """
    zero = np.zeros(net.input_shape, dtype=net.dtype)
    offsets = [o[0] for o in frozen_forward(net, pattern, zero)]
    sys = RegionSystem(net, pattern, offsets, decision, kappa, max_blocks=max_blocks)
    if scale:
        sys.estimate_row_scales(seed=seed)
    return sys
