"""Shared neural building blocks over the autodiff engine.

All layers operate on batched Nodes. Recurrent layers use a single gated
cell design (update + reset gates) for every recurrent use in the project.
Parameters live in plain dicts of leaf Nodes so optimizers and checkpoints
can treat them uniformly.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError


@dataclass
class LayerSpec:
    kind: str  # embedding | recurrent | conv1d | linear | attention
    in_width: int
    out_width: int
    kernel: int = 1
    direction: str = "forward"  # recurrent only: forward | backward | bi

    def __post_init__(self):
        if self.in_width < 1 or self.out_width < 1:
            raise ValueError(f"layer widths must be >= 1, got {self.in_width}, {self.out_width}")
        if self.kind == "conv1d" and self.kernel % 2 != 1:
            raise ValueError(f"conv kernel width must be odd, got {self.kernel}")
        if self.kind not in ("embedding", "recurrent", "conv1d", "linear", "attention"):
            raise ValueError(f"unknown layer kind: {self.kind}")


def glorot(rng, shape, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return ad.parameter(rng.uniform(-s, s, size=shape))


def zeros(shape):
    return ad.parameter(np.zeros(shape))


def _gru_params(rng, in_width, h):
    return {
        "w_zr": glorot(rng, (in_width + h, 2 * h), in_width + h, 2 * h),
        "b_zr": zeros(2 * h),
        "w_n": glorot(rng, (in_width + h, h), in_width + h, h),
        "b_n": zeros(h),
    }


def init_parameters(spec, rng):
    """Glorot-uniform weights, zero biases; deterministic given rng state."""
    k = spec.kind
    if k == "embedding":
        return {"table": glorot(rng, (spec.in_width, spec.out_width),
                                spec.in_width, spec.out_width)}
    if k == "linear":
        return {"w": glorot(rng, (spec.in_width, spec.out_width),
                            spec.in_width, spec.out_width),
                "b": zeros(spec.out_width)}
    if k == "conv1d":
        fan_in = spec.kernel * spec.in_width
        return {"w": glorot(rng, (spec.kernel, spec.in_width, spec.out_width),
                            fan_in, spec.out_width),
                "b": zeros(spec.out_width)}
    if k == "attention":
        return {"w": glorot(rng, (spec.in_width, spec.out_width),
                            spec.in_width, spec.out_width),
                "b": zeros(spec.out_width),
                "v": glorot(rng, (spec.out_width,), spec.out_width, 1)}
    if k == "recurrent":
        if spec.direction == "bi":
            fwd = _gru_params(rng, spec.in_width, spec.out_width)
            bwd = _gru_params(rng, spec.in_width, spec.out_width)
            return {**fwd, **{f"{k_}_rev": v for k_, v in bwd.items()}}
        return _gru_params(rng, spec.in_width, spec.out_width)
    raise ValueError(f"unknown layer kind: {k}")


def gru_step(params, x_t, h, suffix=""):
    """One gated-cell update. x_t: (B, in), h: (B, H) -> new h."""
    w_zr = params["w_zr" + suffix]
    b_zr = params["b_zr" + suffix]
    w_n = params["w_n" + suffix]
    b_n = params["b_n" + suffix]
    hsize = h.shape[-1]
    xh = ad.concat([x_t, h], axis=-1)
    zr = ad.sigmoid(xh @ w_zr + b_zr)
    z = zr[:, :hsize]
    r = zr[:, hsize:]
    xn = ad.concat([x_t, r * h], axis=-1)
    n = ad.tanh(xn @ w_n + b_n)
    return (1.0 - z) * h + z * n


def gru_run(params, x, mask=None, reverse=False, suffix=""):
    """Run a gated cell over time.

    x: Node (B, T, in); mask: optional (B, T) float array, 1 for valid frames.
    Returns (list of per-step h Nodes in time order, final h Node).
    Masked steps carry the previous state through, so right-padded batches
    give the same states as per-sample runs.
    """
    B, T, _ = x.shape
    hsize = params["w_n" + suffix].shape[-1]
    h = ad.constant(np.zeros((B, hsize)))
    steps = range(T - 1, -1, -1) if reverse else range(T)
    hs = [None] * T
    for t in steps:
        x_t = x[:, t, :]
        h_new = gru_step(params, x_t, h, suffix=suffix)
        if mask is not None:
            m = mask[:, t:t + 1]
            h = m * h_new + (1.0 - m) * h
        else:
            h = h_new
        hs[t] = h
    return hs, h


def bigru_run(params, x, mask=None):
    """Bidirectional gated recurrence; per-step output is the concatenation
    of direction-wise states. Returns (list of (B, 2H) Nodes, final (B, 2H))."""
    fwd, h_f = gru_run(params, x, mask=mask, reverse=False)
    bwd, h_b = gru_run(params, x, mask=mask, reverse=True, suffix="_rev")
    hs = [ad.concat([f, b], axis=-1) for f, b in zip(fwd, bwd)]
    return hs, ad.concat([h_f, h_b], axis=-1)


def stack_time(hs):
    """Stack a list of (B, H) Nodes into (B, T, H)."""
    B, H = hs[0].shape
    return ad.concat([ad.reshape(h, (B, 1, H)) for h in hs], axis=1)


def additive_attention(params, hs, mask=None):
    """Additive attention pooling over time.

    hs: list of (B, H) Nodes. Scores s_t = v^T tanh(W h_t + b); weights are
    a softmax over time (masked positions excluded). Returns
    (context (B, H), weights (B, T)).
    """
    B = hs[0].shape[0]
    v = ad.reshape(params["v"], (-1, 1))
    scores = [ad.tanh(h @ params["w"] + params["b"]) @ v for h in hs]  # (B,1) each
    s = ad.concat(scores, axis=1)  # (B, T)
    if mask is not None:
        s = s + (mask - 1.0) * 1e9
    alpha = ad.softmax(s)
    ctx = alpha[:, 0:1] * hs[0]
    for t in range(1, len(hs)):
        ctx = ctx + alpha[:, t:t + 1] * hs[t]
    return ctx, alpha


def run_layer(spec, params, x, mask=None):
    """Apply a layer with textbook semantics; see LayerSpec for kinds."""
    k = spec.kind
    if k == "embedding":
        idx = np.asarray(x, dtype=np.int64)
        if idx.size and idx.max() >= spec.in_width:
            raise ShapeError(f"embedding: index {idx.max()} out of range for table of {spec.in_width}")
        return params["table"][idx]
    if k == "linear":
        if x.shape[-1] != spec.in_width:
            raise ShapeError(f"linear: input width {x.shape[-1]} != spec {spec.in_width}")
        return x @ params["w"] + params["b"]
    if k == "conv1d":
        if x.shape[-1] != spec.in_width:
            raise ShapeError(f"conv1d: input width {x.shape[-1]} != spec {spec.in_width}")
        return ad.conv1d(x, params["w"], params["b"])
    if k == "recurrent":
        if x.shape[-1] != spec.in_width:
            raise ShapeError(f"recurrent: input width {x.shape[-1]} != spec {spec.in_width}")
        if spec.direction == "bi":
            hs, _ = bigru_run(params, x, mask=mask)
        else:
            hs, _ = gru_run(params, x, mask=mask, reverse=(spec.direction == "backward"))
        return stack_time(hs)
    if k == "attention":
        if x.shape[-1] != spec.in_width:
            raise ShapeError(f"attention: input width {x.shape[-1]} != spec {spec.in_width}")
        B, T, H = x.shape
        hs = [x[:, t, :] for t in range(T)]
        ctx, _ = additive_attention(params, hs, mask=mask)
        return ctx
    raise ValueError(f"unknown layer kind: {k}")


def collect(params_tree, prefix=""):
    """Flatten a nested dict of parameter Nodes into (name, Node) pairs in
    deterministic (sorted) order."""
    out = []
    for key in sorted(params_tree):
        val = params_tree[key]
        name = f"{prefix}{key}"
        if isinstance(val, dict):
            out.extend(collect(val, prefix=name + "."))
        elif isinstance(val, Node):
            out.append((name, val))
    return out
