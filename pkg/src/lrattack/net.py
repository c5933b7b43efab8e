"""Piecewise-affine networks: evaluation, activation patterns and the
region-frozen linear maps.

A network is an ordered list of layers.  Output index 0 is the input
itself and output index ``k`` is produced by ``layers[k - 1]``.  Every layer
reads output ``k - 1``; :class:`ResidualAdd` additionally reads an earlier
output named by its ``source`` index.

Inside the linear region of an anchor the network is affine,
``x_k = V_k x + v_k``.  :func:`frozen_jvp` evaluates ``V_k u`` for all ``k``
in one forward sweep and :func:`frozen_vjp` evaluates ``sum_k V_k^T w_k`` in
one reverse sweep, so no Jacobian is ever formed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import _kernels as K
from .errors import ConfigError, NumericError


# --------------------------------------------------------------------------
# layers
#
# Each layer works on batched arrays (B, *shape).  ``forward`` applies the
# layer, ``linear`` its frozen linear part and ``linear_t`` the transpose.
# ``state`` is the layer's slice of the activation pattern (None for layers
# that are affine everywhere).


@dataclass(frozen=True, eq=False)
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.weight.shape[1]:
            raise ConfigError(f"Dense expects input ({self.weight.shape[1]},), got {shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ConfigError("Dense bias shape does not match weight")
        return (self.weight.shape[0],)

    def forward(self, x):
        return x @ self.weight.T + self.bias

    def linear(self, u, state=None):
        return u @ self.weight.T

    def linear_t(self, g, state=None):
        return g @ self.weight


@dataclass(frozen=True, eq=False)
class Conv2d:
    weight: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.weight.shape[1]:
            raise ConfigError(f"Conv2d expects {self.weight.shape[1]} input channels, got {shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ConfigError("Conv2d bias shape does not match weight")
        kh, kw = self.weight.shape[2:]
        ho = K.out_size(shape[1], kh, self.stride, self.padding)
        wo = K.out_size(shape[2], kw, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ConfigError(f"Conv2d kernel does not fit input {shape}")
        return (self.weight.shape[0], ho, wo)

    def forward(self, x):
        return self.linear(x) + self.bias[None, :, None, None]

    def linear(self, u, state=None):
        return K.conv2d(u, self.weight, self.stride, self.padding)

    def linear_t(self, g, state=None, in_shape=None):
        return K.conv2d_transpose(g, self.weight, self.stride, self.padding, in_shape[1], in_shape[2])


@dataclass(frozen=True, eq=False)
class ReLU:
    negative_slope: float = 0.0

    def output_shape(self, shape):
        if not 0.0 <= self.negative_slope < 1.0:
            raise ConfigError("negative_slope must lie in [0, 1)")
        return tuple(shape)

    def forward(self, x):
        if self.negative_slope == 0.0:
            return np.maximum(x, 0)
        return np.where(x >= 0, x, self.negative_slope * x)

    def pattern(self, x):
        # sgn(0) = +1
        return np.where(x.reshape(-1) >= 0, 1, -1).astype(np.int8)

    def slopes(self, signs, dtype):
        return np.where(signs > 0, 1.0, self.negative_slope).astype(dtype)

    def linear(self, u, state):
        h = self.slopes(state, u.dtype)
        return u * h.reshape(u.shape[1:])

    def linear_t(self, g, state):
        return self.linear(g, state)


@dataclass(frozen=True, eq=False)
class MaxPool2d:
    window: int
    stride: int | None = None

    @property
    def step(self):
        return self.window if self.stride is None else self.stride

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ConfigError("MaxPool2d expects a (c, h, w) input")
        ho = K.out_size(shape[1], self.window, self.step)
        wo = K.out_size(shape[2], self.window, self.step)
        if ho < 1 or wo < 1:
            raise ConfigError(f"MaxPool2d window does not fit input {shape}")
        return (shape[0], ho, wo)

    def forward(self, x):
        idx = K.maxpool_argmax(x, self.window, self.step)
        flat = x.reshape(x.shape[0], -1)
        return np.take_along_axis(flat, idx.reshape(x.shape[0], -1), axis=1).reshape(idx.shape)

    def pattern(self, x):
        return K.maxpool_argmax(x, self.window, self.step).reshape(-1)

    def pools(self, in_shape):
        """Flat input indices of every pool, shape (n_pools, window**2)."""
        c, h, w = in_shape
        ho, wo = self.output_shape(in_shape)[1:]
        ch = np.arange(c)[:, None, None, None, None]
        r = (np.arange(ho) * self.step)[None, :, None, None, None] + np.arange(self.window)[None, None, None, :, None]
        s = (np.arange(wo) * self.step)[None, None, :, None, None] + np.arange(self.window)[None, None, None, None, :]
        return ((ch * h + r) * w + s).reshape(c * ho * wo, self.window * self.window)

    def linear(self, u, state, out_shape=None):
        flat = u.reshape(u.shape[0], -1)
        return flat[:, state].reshape((u.shape[0],) + tuple(out_shape))

    def linear_t(self, g, state, in_shape=None):
        n = int(np.prod(in_shape))
        out = K.scatter_add(g.reshape(g.shape[0], -1), state, n)
        return out.reshape((g.shape[0],) + tuple(in_shape))


@dataclass(frozen=True, eq=False)
class AvgPool2d:
    window: int
    stride: int | None = None

    @property
    def step(self):
        return self.window if self.stride is None else self.stride

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ConfigError("AvgPool2d expects a (c, h, w) input")
        ho = K.out_size(shape[1], self.window, self.step)
        wo = K.out_size(shape[2], self.window, self.step)
        if ho < 1 or wo < 1:
            raise ConfigError(f"AvgPool2d window does not fit input {shape}")
        return (shape[0], ho, wo)

    def forward(self, x):
        return self.linear(x)

    def linear(self, u, state=None):
        return K.avgpool(u, self.window, self.step)

    def linear_t(self, g, state=None, in_shape=None):
        return K.avgpool_transpose(g, self.window, self.step, in_shape[1], in_shape[2])


@dataclass(frozen=True, eq=False)
class BatchNorm:
    mean: np.ndarray
    var: np.ndarray
    scale: np.ndarray
    shift: np.ndarray
    eps: float = 1e-5

    def output_shape(self, shape):
        if self.eps <= 0:
            raise ConfigError("BatchNorm eps must be positive")
        n = self.mean.shape[0]
        if shape[0] != n or any(a.shape != (n,) for a in (self.var, self.scale, self.shift)):
            raise ConfigError(f"BatchNorm has {n} channels, input shape is {shape}")
        return tuple(shape)

    def _bcast(self, a, ndim):
        return a.reshape((1, -1) + (1,) * (ndim - 2))

    def gain(self):
        return self.scale / np.sqrt(self.var + self.eps)

    def forward(self, x):
        g = self._bcast(self.gain(), x.ndim)
        return (x - self._bcast(self.mean, x.ndim)) * g + self._bcast(self.shift, x.ndim)

    def linear(self, u, state=None):
        return u * self._bcast(self.gain(), u.ndim).astype(u.dtype)

    def linear_t(self, g, state=None):
        return self.linear(g)


@dataclass(frozen=True, eq=False)
class ResidualAdd:
    """Adds output ``source`` (an output index) to the previous output."""

    source: int

    def output_shape(self, shape):
        return tuple(shape)


@dataclass(frozen=True, eq=False)
class Flatten:
    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def linear(self, u, state=None):
        return u.reshape(u.shape[0], -1)

    def linear_t(self, g, state=None, in_shape=None):
        return g.reshape((g.shape[0],) + tuple(in_shape))


@dataclass(frozen=True, eq=False)
class InputNormalize:
    """``(x - mean(x)) / divisor`` per image, or ``x / divisor``."""

    subtract_mean: bool = False
    divisor: float = 1.0

    def output_shape(self, shape):
        if self.divisor == 0:
            raise ConfigError("InputNormalize divisor must be nonzero")
        return tuple(shape)

    def forward(self, x):
        return self.linear(x)

    def linear(self, u, state=None):
        if self.subtract_mean:
            axes = tuple(range(1, u.ndim))
            u = u - u.mean(axis=axes, keepdims=True)
        return u / np.asarray(self.divisor, dtype=u.dtype)

    def linear_t(self, g, state=None):
        # centering is an orthogonal projection, hence self-adjoint
        return self.linear(g)


LAYER_TYPES = {
    cls.__name__: cls
    for cls in (Dense, Conv2d, ReLU, MaxPool2d, AvgPool2d, BatchNorm, ResidualAdd, Flatten, InputNormalize)
}
PATTERN_LAYERS = (ReLU, MaxPool2d)
_ARRAY_FIELDS = {
    Dense: ("weight", "bias"),
    Conv2d: ("weight", "bias"),
    BatchNorm: ("mean", "var", "scale", "shift"),
}


# --------------------------------------------------------------------------
# network


class Network:
    """Immutable layer stack with precomputed shapes.

    ``shapes[k]`` is the shape of output ``k`` (``shapes[0]`` the input).
    """

    def __init__(self, layers: Sequence, input_shape, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.layers = tuple(_cast_layer(layer, self.dtype) for layer in layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        shapes = [self.input_shape]
        for k, layer in enumerate(self.layers, start=1):
            if isinstance(layer, ResidualAdd):
                if not 0 <= layer.source < k:
                    raise ConfigError(f"layer {k}: residual source {layer.source} must precede it")
                if shapes[layer.source] != shapes[k - 1]:
                    raise ConfigError(
                        f"layer {k}: residual shapes {shapes[layer.source]} and {shapes[k - 1]} differ"
                    )
            shapes.append(tuple(layer.output_shape(shapes[k - 1])))
        if len(shapes[-1]) != 1:
            raise ConfigError("the final layer must produce a vector of logits")
        self.shapes = tuple(shapes)
        self.num_classes = shapes[-1][0]
        self.pattern_layers = tuple(k for k, layer in enumerate(self.layers) if isinstance(layer, PATTERN_LAYERS))

    @property
    def input_dim(self):
        return int(np.prod(self.input_shape))

    @property
    def neuron_counts(self):
        return tuple(int(np.prod(s)) for s in self.shapes[1:])

    def astype(self, dtype):
        return Network(self.layers, self.input_shape, dtype)

    def __len__(self):
        return len(self.layers)


def _cast_layer(layer, dtype):
    names = _ARRAY_FIELDS.get(type(layer))
    if not names:
        return layer
    return replace(layer, **{n: np.ascontiguousarray(getattr(layer, n), dtype=dtype) for n in names})


def _layer_linear(net, k, u, state):
    layer = net.layers[k]
    if isinstance(layer, MaxPool2d):
        return layer.linear(u, state, out_shape=net.shapes[k + 1])
    return layer.linear(u, state)


def _layer_linear_t(net, k, g, state):
    layer = net.layers[k]
    if isinstance(layer, (Conv2d, MaxPool2d, AvgPool2d, Flatten)):
        return layer.linear_t(g, state, in_shape=net.shapes[k])
    return layer.linear_t(g, state)


# --------------------------------------------------------------------------
# activations and patterns


@dataclass(frozen=True)
class Activations:
    """All outputs of one forward pass: ``outputs[0]`` is the input."""

    net: Network
    outputs: tuple

    @property
    def logits(self):
        return self.outputs[-1]


@dataclass(frozen=True, eq=False)
class ActivationPattern:
    """ReLU signs and max-pool argmaxes identifying a linear region.

    ``relu_signs`` and ``maxpool_argmax`` are aligned with the ReLU resp.
    MaxPool2d layers of the network, in layer order.
    """

    relu_signs: tuple
    maxpool_argmax: tuple
    layer_kinds: tuple = ()  # ('relu' | 'maxpool', layer position) in order
    digest: int = field(default=0)

    @classmethod
    def build(cls, net, states):
        """Assemble from per-pattern-layer states (in ``net.pattern_layers`` order)."""
        relu, pool, kinds = [], [], []
        for k, st in zip(net.pattern_layers, states):
            if isinstance(net.layers[k], ReLU):
                st = np.asarray(st, dtype=np.int8).reshape(-1)
                relu.append(st)
                kinds.append(("relu", k))
            else:
                st = np.asarray(st, dtype=np.int64).reshape(-1)
                pool.append(st)
                kinds.append(("maxpool", k))
        h = hashlib.blake2b(digest_size=8)
        for (kind, k), st in zip(kinds, _ordered(relu, pool, kinds)):
            h.update(f"{kind}:{k}:{st.size};".encode())
            h.update(st.tobytes())
        return cls(tuple(relu), tuple(pool), tuple(kinds), int.from_bytes(h.digest(), "little"))

    @property
    def hash(self):
        return self.digest

    def states(self):
        """Per-pattern-layer states in layer order."""
        return _ordered(self.relu_signs, self.maxpool_argmax, self.layer_kinds)

    def __hash__(self):
        return self.digest

    def __eq__(self, other):
        if not isinstance(other, ActivationPattern):
            return NotImplemented
        if self.digest != other.digest or self.layer_kinds != other.layer_kinds:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.states(), other.states()))

    @property
    def num_bits(self):
        return sum(s.size for s in self.relu_signs)


def _ordered(relu, pool, kinds):
    ri = iter(relu)
    pi = iter(pool)
    return [next(ri) if kind == "relu" else next(pi) for kind, _ in kinds]


def _state_map(net, pattern):
    if pattern is None:
        return {}
    if tuple(k for _, k in pattern.layer_kinds) != net.pattern_layers:
        raise ConfigError("activation pattern does not belong to this network")
    return dict(zip(net.pattern_layers, pattern.states()))


# --------------------------------------------------------------------------
# evaluation


def _as_batch(net, x):
    x = np.asarray(x, dtype=net.dtype)
    if x.shape == net.input_shape:
        return x[None], False
    if x.shape[1:] == net.input_shape:
        return x, True
    if x.ndim >= 1 and x.shape[-1] == net.input_dim and x.size % net.input_dim == 0:
        # flat vectors are accepted for convenience
        b = x.reshape(-1, *net.input_shape)
        return b, x.ndim > 1
    raise ConfigError(f"input shape {x.shape} does not match network input {net.input_shape}")


def forward_batch(net, xs, keep=False):
    """Evaluate a batch; returns the logits (and all outputs if ``keep``)."""
    h, _ = _as_batch(net, xs)
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite network input")
    outs = [h]
    for k, layer in enumerate(net.layers):
        if isinstance(layer, ResidualAdd):
            h = h + outs[layer.source]
        else:
            h = layer.forward(h)
        h = h.astype(net.dtype, copy=False)
        outs.append(h)
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite network output")
    return (h, outs) if keep else h


def forward(net, x):
    """Evaluate a single input; returns ``(logits, Activations)``."""
    x = np.asarray(x, dtype=net.dtype)
    if x.shape != net.input_shape and x.shape != (net.input_dim,):
        raise ConfigError(f"input shape {x.shape} does not match network input {net.input_shape}")
    logits, outs = forward_batch(net, x.reshape(net.input_shape), keep=True)
    return logits[0], Activations(net, tuple(o[0] for o in outs))


def classify(net, x):
    """Predicted class (ties go to the lowest index)."""
    logits, _ = forward(net, x)
    return int(np.argmax(logits))


def classify_batch(net, xs):
    return np.argmax(forward_batch(net, xs), axis=1)


def pattern_of(acts: Activations) -> ActivationPattern:
    net = acts.net
    states = [net.layers[k].pattern(acts.outputs[k][None]) for k in net.pattern_layers]
    return ActivationPattern.build(net, states)


def pattern_at(net, x):
    return pattern_of(forward(net, x)[1])


# --------------------------------------------------------------------------
# frozen (region-affine) maps


def frozen_jvp(net, pattern, u, with_bias=False):
    """Push ``u`` through the frozen linear maps.

    Returns a list with ``V_k u`` for every output index ``k`` (entry 0 is
    ``u`` itself).  ``u`` may be a single input or a batch; the returned
    tangents keep a leading batch axis.  With ``with_bias`` the layer biases
    are applied too, giving the full affine surrogate ``V_k u + v_k``.
    """
    states = _state_map(net, pattern)
    h, _ = _as_batch(net, u)
    outs = [h]
    for k, layer in enumerate(net.layers):
        if isinstance(layer, ResidualAdd):
            h = h + outs[layer.source]
        elif with_bias and isinstance(layer, (Dense, Conv2d, BatchNorm)):
            h = layer.forward(h)
        else:
            h = _layer_linear(net, k, h, states.get(k))
        h = h.astype(net.dtype, copy=False)
        outs.append(h)
    return outs


def frozen_forward(net, pattern, x):
    """Affine surrogate ``V_k x + v_k`` of a (possibly synthetic) pattern."""
    return frozen_jvp(net, pattern, x, with_bias=True)


def frozen_vjp(net, pattern, cotangents):
    """Compute ``sum_k V_k^T w_k`` in one reverse sweep.

    ``cotangents`` maps output index ``k`` to ``w_k`` shaped like output
    ``k`` (optionally with a leading batch axis, which must agree across
    entries).  Returns a batched array shaped (B, *input_shape).
    """
    states = _state_map(net, pattern)
    n_out = len(net.layers)
    grads = [None] * (n_out + 1)
    batch = None
    for k, w in cotangents.items():
        if not 0 <= k <= n_out:
            raise ConfigError(f"cotangent attached to unknown output {k}")
        w = np.asarray(w, dtype=net.dtype)
        if w.shape == net.shapes[k]:
            w = w[None]
        elif w.shape[1:] != net.shapes[k]:
            raise ConfigError(f"cotangent for output {k} has shape {w.shape}, expected {net.shapes[k]}")
        if batch is not None and w.shape[0] != batch:
            raise ConfigError("cotangent batch sizes differ")
        batch = w.shape[0]
        grads[k] = w if grads[k] is None else grads[k] + w
    if batch is None:
        raise ConfigError("no cotangents given")
    for k in range(n_out, 0, -1):
        g = grads[k]
        if g is None:
            continue
        layer = net.layers[k - 1]
        if isinstance(layer, ResidualAdd):
            s = layer.source
            grads[s] = g if grads[s] is None else grads[s] + g
            back = g
        else:
            back = _layer_linear_t(net, k - 1, g, states.get(k - 1)).astype(net.dtype, copy=False)
        grads[k - 1] = back if grads[k - 1] is None else grads[k - 1] + back
    out = grads[0]
    return out if out is not None else np.zeros((batch,) + net.input_shape, dtype=net.dtype)


def affine_offsets(net, acts: Activations):
    """Offsets ``v_k = x_k - V_k x`` of the region containing the anchor."""
    pattern = pattern_of(acts)
    lin = frozen_jvp(net, pattern, acts.outputs[0])
    return [acts.outputs[k] - lin[k][0] for k in range(len(net.layers) + 1)]
