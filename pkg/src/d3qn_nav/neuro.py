"""A small numpy neural engine: conv1d, dense, relu, reverse-mode gradients, Adam.

A network is a shared *trunk* (a layer list) followed by zero or more named
*heads* (each a layer list fed from the trunk output). Head outputs are
concatenated in declaration order; with no heads the trunk output is the net
output. Parameters are float32 by default; every function is dtype-generic so
gradient checks can run in float64.

Layouts: conv1d weights are ``(out_ch, in_ch, filter_len)`` and consume
channel-major inputs ``(batch, in_ch, length)`` (a flat input of size
``in_ch * length`` is reshaped). Dense weights are ``(n_in, n_out)``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, TrainingError, UsageError


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    n_in: int = 0
    n_out: int = 0
    filter_len: int = 0
    stride: int = 1

    def to_dict(self) -> dict:
        if self.kind == "relu":
            return {"kind": "relu"}
        if self.kind == "dense":
            return {"kind": "dense", "n_in": self.n_in, "n_out": self.n_out}
        return {
            "kind": "conv1d",
            "filter_len": self.filter_len,
            "in_ch": self.n_in,
            "out_ch": self.n_out,
            "stride": self.stride,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        if d["kind"] == "relu":
            return relu()
        if d["kind"] == "dense":
            return dense(d["n_in"], d["n_out"])
        if d["kind"] == "conv1d":
            return conv1d(d["filter_len"], d["in_ch"], d["out_ch"], d["stride"])
        raise ConfigError(f"unknown layer kind {d['kind']!r}")


def conv1d(filter_len: int, in_ch: int, out_ch: int, stride: int = 1) -> LayerSpec:
    if filter_len < 1 or in_ch < 1 or out_ch < 1 or stride < 1:
        raise ConfigError("conv1d sizes and stride must be >= 1")
    return LayerSpec("conv1d", in_ch, out_ch, filter_len, stride)


def dense(n_in: int, n_out: int) -> LayerSpec:
    if n_in < 1 or n_out < 1:
        raise ConfigError("dense sizes must be >= 1")
    return LayerSpec("dense", n_in, n_out)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def conv_out_len(length: int, filter_len: int, stride: int) -> int:
    return (length - filter_len) // stride + 1


def infer_shape(specs: Sequence[LayerSpec], in_shape: tuple) -> tuple:
    """Propagate a per-sample shape through ``specs``; raise if they don't compose.

    Shapes are ``(n,)`` for flat activations or ``(channels, length)``.
    """
    shape = tuple(in_shape)
    for i, s in enumerate(specs):
        size = int(np.prod(shape))
        if s.kind == "dense":
            if size != s.n_in:
                raise ConfigError(f"layer {i}: dense expects {s.n_in} inputs, got {size}")
            shape = (s.n_out,)
        elif s.kind == "conv1d":
            if len(shape) == 2 and shape[0] != s.n_in:
                raise ConfigError(f"layer {i}: conv1d expects {s.n_in} channels, got {shape[0]}")
            if size % s.n_in:
                raise ConfigError(f"layer {i}: {size} inputs do not split into {s.n_in} channels")
            length = size // s.n_in
            if length < s.filter_len:
                raise ConfigError(f"layer {i}: input length {length} < filter {s.filter_len}")
            shape = (s.n_out, conv_out_len(length, s.filter_len, s.stride))
        elif s.kind != "relu":
            raise ConfigError(f"layer {i}: unknown kind {s.kind!r}")
    return shape


@dataclass
class NetParams:
    """Architecture plus weights. ``version`` is bumped on every update."""

    input_size: int
    trunk: tuple
    heads: tuple = ()  # ((name, (LayerSpec, ...)), ...)
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    version: int = 0
    flat: Optional[np.ndarray] = field(default=None, repr=False)

    def layers(self) -> list[LayerSpec]:
        out = list(self.trunk)
        for _, specs in self.heads:
            out.extend(specs)
        return out

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in declaration order (W then b, per layer)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            if w is not None:
                out.extend((w, b))
        return out

    @property
    def output_size(self) -> int:
        trunk_shape = infer_shape(self.trunk, (self.input_size,))
        if not self.heads:
            return int(np.prod(trunk_shape))
        return sum(int(np.prod(infer_shape(h, trunk_shape))) for _, h in self.heads)

    @property
    def dtype(self):
        return self.flat.dtype if self.flat is not None else np.float32

    def architecture(self) -> dict:
        return {
            "input_size": self.input_size,
            "trunk": [s.to_dict() for s in self.trunk],
            "heads": [[name, [s.to_dict() for s in h]] for name, h in self.heads],
        }

    def digest(self) -> str:
        return hashlib.sha256(self.flat.tobytes()).hexdigest()


def _param_shapes(spec: LayerSpec):
    if spec.kind == "dense":
        return (spec.n_in, spec.n_out), (spec.n_out,), spec.n_in
    if spec.kind == "conv1d":
        return (spec.n_out, spec.n_in, spec.filter_len), (spec.n_out,), spec.n_in * spec.filter_len
    return None, None, 0


def init_params(
    input_size: int,
    trunk: Sequence[LayerSpec],
    heads: Sequence[tuple[str, Sequence[LayerSpec]]] = (),
    rng: Optional[np.random.Generator] = None,
    dtype=np.float32,
) -> NetParams:
    """He-uniform weights, zero biases."""
    rng = rng if rng is not None else np.random.default_rng()
    trunk = tuple(trunk)
    heads = tuple((name, tuple(h)) for name, h in heads)
    trunk_shape = infer_shape(trunk, (input_size,))
    for _, h in heads:
        infer_shape(h, trunk_shape)
    params = NetParams(input_size, trunk, heads)
    layers = params.layers()
    total = 0
    for spec in layers:
        w_shape, b_shape, _ = _param_shapes(spec)
        if w_shape is not None:
            total += int(np.prod(w_shape)) + int(np.prod(b_shape))
    _bind_views(params, np.zeros(total, dtype=dtype))
    for spec, w in zip(layers, params.weights):
        if w is not None:
            fan_in = _param_shapes(spec)[2]
            limit = np.sqrt(6.0 / fan_in)
            w[...] = rng.uniform(-limit, limit, size=w.shape)
    return params


def _bind_views(params: NetParams, flat: np.ndarray) -> None:
    """Point every weight/bias at a slice of one contiguous buffer."""
    params.flat = flat
    params.weights, params.biases = [], []
    offset = 0
    for spec in params.layers():
        w_shape, b_shape, _ = _param_shapes(spec)
        if w_shape is None:
            params.weights.append(None)
            params.biases.append(None)
            continue
        nw, nb = int(np.prod(w_shape)), int(np.prod(b_shape))
        params.weights.append(flat[offset : offset + nw].reshape(w_shape))
        offset += nw
        params.biases.append(flat[offset : offset + nb].reshape(b_shape))
        offset += nb


def zero_params(params: NetParams) -> None:
    params.flat[...] = 0
    params.version += 1


def clone_params(params: NetParams) -> NetParams:
    """Deep, independent copy (version included)."""
    out = NetParams(params.input_size, params.trunk, params.heads, version=params.version)
    _bind_views(out, params.flat.copy())
    return out


def copy_into(dst: NetParams, src: NetParams) -> None:
    """Overwrite ``dst`` weights with ``src`` weights in place."""
    dst.flat[...] = src.flat
    dst.version += 1


def cast_params(params: NetParams, dtype) -> NetParams:
    out = NetParams(params.input_size, params.trunk, params.heads, version=params.version)
    _bind_views(out, params.flat.astype(dtype))
    return out


# ----------------------------------------------------------------------
# Forward / backward
# ----------------------------------------------------------------------


@dataclass
class Tape:
    version: int
    batched: bool
    trunk_cache: list
    head_caches: list
    head_widths: list


def _layer_forward(spec: LayerSpec, w, b, x):
    if spec.kind == "relu":
        mask = x > 0
        return x * mask, mask
    if spec.kind == "dense":
        in_shape = x.shape
        x2 = x.reshape(x.shape[0], -1)
        return x2 @ w + b, (x2, in_shape)
    # conv1d
    batch = x.shape[0]
    x3 = x.reshape(batch, spec.n_in, -1)
    k, s = spec.filter_len, spec.stride
    windows = sliding_window_view(x3, k, axis=2)[:, :, ::s, :]  # (B, C, Lout, K)
    l_out = windows.shape[2]
    cols = windows.transpose(0, 2, 1, 3).reshape(batch * l_out, spec.n_in * k)
    y = cols @ w.reshape(spec.n_out, -1).T + b
    y = y.reshape(batch, l_out, spec.n_out).transpose(0, 2, 1)
    return y, (cols, x3.shape, x.shape, l_out)


def _layer_backward(spec: LayerSpec, w, cache, gout):
    """Return (grad_input, grad_w, grad_b)."""
    if spec.kind == "relu":
        return gout * cache, None, None
    if spec.kind == "dense":
        x2, in_shape = cache
        g2 = gout.reshape(gout.shape[0], -1)
        gw = x2.T @ g2
        gb = g2.sum(axis=0, dtype=np.float64).astype(w.dtype)
        gx = (g2 @ w.T).reshape(in_shape)
        return gx, gw, gb
    cols, x3_shape, in_shape, l_out = cache
    batch, n_in, length = x3_shape
    k, s = spec.filter_len, spec.stride
    g3 = gout.reshape(batch, spec.n_out, l_out)
    g2 = g3.transpose(0, 2, 1).reshape(batch * l_out, spec.n_out)
    gw = (g2.T @ cols).reshape(w.shape)
    gb = g3.sum(axis=(0, 2), dtype=np.float64).astype(w.dtype)
    dcols = (g2 @ w.reshape(spec.n_out, -1)).reshape(batch, l_out, n_in, k)
    gx = np.zeros(x3_shape, dtype=gout.dtype)
    stop = (l_out - 1) * s + 1
    for j in range(k):
        gx[:, :, j : j + stop : s] += dcols[:, :, :, j].transpose(0, 2, 1)
    return gx.reshape(in_shape), gw, gb


def _run(specs, weights, biases, x):
    cache = []
    for spec, w, b in zip(specs, weights, biases):
        x, c = _layer_forward(spec, w, b, x)
        cache.append(c)
    return x, cache


def forward(params: NetParams, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Evaluate the network on one sample ``(input_size,)`` or a batch ``(B, input_size)``."""
    x = np.asarray(x)
    batched = x.ndim == 2
    if x.ndim not in (1, 2) or x.shape[-1] != params.input_size:
        raise ConfigError(f"input shape {x.shape} does not match input size {params.input_size}")
    x = x.reshape(-1, params.input_size).astype(params.dtype, copy=False)

    n_trunk = len(params.trunk)
    h, trunk_cache = _run(params.trunk, params.weights[:n_trunk], params.biases[:n_trunk], x)
    h = h.reshape(h.shape[0], -1) if not params.heads else h
    head_caches, outs, widths = [], [], []
    start = n_trunk
    for _, specs in params.heads:
        stop = start + len(specs)
        y, c = _run(specs, params.weights[start:stop], params.biases[start:stop], h)
        y = y.reshape(y.shape[0], -1)
        head_caches.append(c)
        outs.append(y)
        widths.append(y.shape[1])
        start = stop
    out = np.concatenate(outs, axis=1) if outs else h
    tape = Tape(params.version, batched, trunk_cache, head_caches, widths)
    return (out if batched else out[0]), tape


def _run_backward(specs, weights, cache, g, grads_w, grads_b, offset):
    for i in range(len(specs) - 1, -1, -1):
        g, gw, gb = _layer_backward(specs[i], weights[i], cache[i], g)
        grads_w[offset + i] = gw
        grads_b[offset + i] = gb
    return g


def backward(params: NetParams, tape: Tape, output_grad: np.ndarray) -> tuple[list, np.ndarray]:
    """Reverse-mode pass.

    Returns:
        grads: arrays aligned with ``params.arrays()``.
        input_grad: gradient with respect to the forward input.
    """
    if tape.version != params.version:
        raise UsageError(
            f"stale tape: recorded at params version {tape.version}, params now at {params.version}"
        )
    g = np.asarray(output_grad, dtype=params.dtype)
    g = g.reshape(-1, g.shape[-1])
    n_layers = len(params.weights)
    grads_w: list = [None] * n_layers
    grads_b: list = [None] * n_layers
    n_trunk = len(params.trunk)

    if params.heads:
        g_trunk = None
        start, col = n_trunk, 0
        for (_, specs), cache, width in zip(params.heads, tape.head_caches, tape.head_widths):
            gh = _run_backward(
                specs, params.weights[start : start + len(specs)], cache,
                g[:, col : col + width], grads_w, grads_b, start,
            )
            g_trunk = gh if g_trunk is None else g_trunk + gh
            start += len(specs)
            col += width
        g = g_trunk
    gx = _run_backward(params.trunk, params.weights[:n_trunk], tape.trunk_cache, g, grads_w, grads_b, 0)

    grads = []
    for gw, gb in zip(grads_w, grads_b):
        if gw is not None:
            grads.extend((gw, gb))
    gx = gx.reshape(-1, params.input_size)
    return grads, (gx if tape.batched else gx[0])


# ----------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------


@dataclass
class AdamState:
    """Moments are flat vectors aligned with ``NetParams.flat``."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    @classmethod
    def for_params(cls, params: NetParams, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(lr=lr, m=np.zeros_like(params.flat), v=np.zeros_like(params.flat), **kw)


def flatten_grads(params: NetParams, grads: Sequence[np.ndarray]) -> np.ndarray:
    arrs = params.arrays()
    if len(grads) != len(arrs):
        raise ConfigError(f"expected {len(arrs)} gradient arrays, got {len(grads)}")
    for i, (g, a) in enumerate(zip(grads, arrs)):
        if g.shape != a.shape:
            raise ConfigError(f"gradient {i} shape {g.shape} != parameter shape {a.shape}")
    return np.concatenate([g.ravel() for g in grads]).astype(params.dtype, copy=False)


def adam_step(params: NetParams, grads, state: AdamState):
    """One bias-corrected Adam update, in place.

    ``grads`` is either a list aligned with ``params.arrays()`` or a flat
    vector aligned with ``params.flat``. Non-finite gradients are rejected
    before anything is modified.
    """
    g = grads if isinstance(grads, np.ndarray) else flatten_grads(params, grads)
    if g.shape != params.flat.shape:
        raise ConfigError(f"flat gradient shape {g.shape} != {params.flat.shape}")
    if not np.isfinite(g).all():
        bad = [i for i, a in enumerate(np.split(g, np.cumsum([x.size for x in params.arrays()])[:-1]))
               if not np.isfinite(a).all()]
        raise TrainingError(f"non-finite gradient in parameter arrays {bad}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    m, v = state.m, state.v
    m *= state.beta1
    m += (1.0 - state.beta1) * g
    v *= state.beta2
    v += (1.0 - state.beta2) * (g * g)
    denom = np.sqrt(v / c2)
    denom += state.eps
    step = m * (state.lr / c1)
    step /= denom
    params.flat -= step
    params.version += 1
    return params, state


# ----------------------------------------------------------------------
# Gradient check
# ----------------------------------------------------------------------


def _relu_masks(tape: Tape) -> list:
    masks = [c for c in tape.trunk_cache if isinstance(c, np.ndarray)]
    for hc in tape.head_caches:
        masks.extend(c for c in hc if isinstance(c, np.ndarray))
    return masks


def grad_check(
    specs: Sequence[LayerSpec],
    trials: int = 10,
    input_size: Optional[int] = None,
    heads: Sequence[tuple[str, Sequence[LayerSpec]]] = (),
    h: float = 1e-4,
    coords_per_array: int = 12,
    seed: int = 0,
) -> float:
    """Worst relative error of ``backward`` against central finite differences.

    Runs in float64 on random params, biases and inputs with a random linear
    read-out ``c . f(x)`` as the scalar loss. Per parameter array a random
    subset of ``coords_per_array`` coordinates is probed (all of them when the
    array is small), plus every input coordinate up to the same cap. Probes
    whose +/-h perturbation flips any relu mask are skipped (kink avoidance).
    """
    if trials < 1:
        raise UsageError("trials must be >= 1")
    specs = tuple(specs)
    if input_size is None:
        first = specs[0] if specs else heads[0][1][0]
        input_size = first.n_in if first.kind == "dense" else first.n_in * 32
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        p = init_params(input_size, specs, heads, rng=rng, dtype=np.float64)
        for b in p.biases:
            if b is not None:
                b[...] = rng.normal(0.0, 0.1, size=b.shape)
        x = rng.normal(0.0, 1.0, size=input_size)
        out, tape = forward(p, x)
        c = rng.normal(0.0, 1.0, size=out.shape)
        grads, gx = backward(p, tape, c)
        base_masks = _relu_masks(tape)

        def probe(target: np.ndarray, idx) -> Optional[float]:
            old = target[idx]
            target[idx] = old + h
            fp, tp = forward(p, x)
            target[idx] = old - h
            fm, tm = forward(p, x)
            target[idx] = old
            for mask_set in (_relu_masks(tp), _relu_masks(tm)):
                if any(not np.array_equal(a, b) for a, b in zip(mask_set, base_masks)):
                    return None
            return float(c @ fp - c @ fm) / (2 * h)

        checks = list(zip(p.arrays(), grads)) + [(x, gx)]
        for arr, g in checks:
            flat_idx = np.arange(arr.size)
            if arr.size > coords_per_array:
                flat_idx = rng.choice(arr.size, coords_per_array, replace=False)
            for fi in flat_idx:
                idx = np.unravel_index(int(fi), arr.shape)
                numeric = probe(arr, idx)
                if numeric is None:
                    continue
                analytic = float(g[idx])
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
