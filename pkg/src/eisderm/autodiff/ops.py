"""Differentiable operations.

Every op takes ``Tensor`` (or array-like) inputs and returns a new ``Tensor``.
The backward closure returns one gradient per parent, in parent order.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import DimensionError, Tensor, check_finite, ensure_tensor


def _result(data, parents, backward, op) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _inputs(op: str, *xs) -> list[Tensor]:
    ts = [ensure_tensor(x) for x in xs]
    check_finite((t.data for t in ts), op)
    return ts


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _inputs("add", a, b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _inputs("sub", a, b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _inputs("mul", a, b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = _inputs("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


# -- activations -------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    (x,) = _inputs("sigmoid", x)
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _result(s, (x,), backward, "sigmoid")


def tanh(x) -> Tensor:
    (x,) = _inputs("tanh", x)
    t = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - t * t),)

    return _result(t, (x,), backward, "tanh")


def relu(x) -> Tensor:
    (x,) = _inputs("relu", x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), backward, "relu")


# -- shape manipulation --------------------------------------------------------

def reshape(x, shape) -> Tensor:
    (x,) = _inputs("reshape", x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), backward, "reshape")


def transpose(x, axes=None) -> Tensor:
    (x,) = _inputs("transpose", x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _result(out, (x,), backward, "transpose")


def getitem(x, index) -> Tensor:
    (x,) = _inputs("getitem", x)
    out = x.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def backward(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(out, (x,), backward, "getitem")


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    ts = _inputs("concat", *xs)
    ref = ts[0]
    ax = axis % ref.ndim
    for t in ts[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax
        ):
            raise DimensionError(
                f"concat along axis {axis}: incompatible shapes {[t.shape for t in ts]}"
            )
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        lead = (slice(None),) * ax
        return tuple(g[lead + (slice(bounds[i], bounds[i + 1]),)] for i in range(len(ts)))

    return _result(out, tuple(ts), backward, "concat")


def stack(xs: Sequence, axis: int = 1) -> Tensor:
    ts = _inputs("stack", *xs)
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _result(out, tuple(ts), backward, "stack")


# -- reductions ----------------------------------------------------------------

def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    (x,) = _inputs("sum", x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum()), (x,), backward, "sum")


def mean(x) -> Tensor:
    (x,) = _inputs("mean", x)
    n = x.size

    def backward(g):
        return (np.full(x.shape, float(g) / n),)

    return _result(np.asarray(x.data.mean()), (x,), backward, "mean")


def global_avg_pool(x) -> Tensor:
    """(B, C, H, W) -> (B, C) mean over the spatial axes."""
    (x,) = _inputs("global_avg_pool", x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects (B, C, H, W), got {x.shape}")
    hw = x.shape[2] * x.shape[3]

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def _length_mask(lengths, batch: int, steps: int) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (batch,):
        raise DimensionError(f"expected {batch} sequence lengths, got shape {lengths.shape}")
    if (lengths < 1).any() or (lengths > steps).any():
        raise DimensionError(f"sequence lengths must lie in [1, {steps}]")
    return np.arange(steps)[None, :] < lengths[:, None]


def seq_max_pool(h, lengths=None) -> Tensor:
    """Max over the sequence axis of ``h`` shaped (B, T, D).

    Positions at or beyond ``lengths[b]`` are ignored. The gradient goes to the
    first position attaining the maximum.
    """
    (h,) = _inputs("seq_max_pool", h)
    if h.ndim != 3:
        raise DimensionError(f"seq_max_pool expects (B, T, D), got {h.shape}")
    b, t, d = h.shape
    data = h.data
    if lengths is not None:
        mask = _length_mask(lengths, b, t)
        data = np.where(mask[:, :, None], data, -np.inf)
    idx = np.argmax(data, axis=1)  # first occurrence
    out = np.take_along_axis(data, idx[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        full = np.zeros(h.shape)
        np.put_along_axis(full, idx[:, None, :], g[:, None, :], axis=1)
        return (full,)

    return _result(out, (h,), backward, "seq_max_pool")


def seq_mean_pool(h, lengths=None) -> Tensor:
    (h,) = _inputs("seq_mean_pool", h)
    if h.ndim != 3:
        raise DimensionError(f"seq_mean_pool expects (B, T, D), got {h.shape}")
    b, t, d = h.shape
    if lengths is None:
        weights = np.full((b, t), 1.0 / t)
    else:
        mask = _length_mask(lengths, b, t)
        weights = mask / np.asarray(lengths, dtype=np.float64)[:, None]
    out = np.einsum("btd,bt->bd", h.data, weights)

    def backward(g):
        return (g[:, None, :] * weights[:, :, None],)

    return _result(out, (h,), backward, "seq_mean_pool")


def seq_last(h, lengths=None) -> Tensor:
    """State at position ``lengths[b] - 1`` for each sequence."""
    (h,) = _inputs("seq_last", h)
    if h.ndim != 3:
        raise DimensionError(f"seq_last expects (B, T, D), got {h.shape}")
    b, t, _ = h.shape
    if lengths is None:
        last = np.full(b, t - 1)
    else:
        _length_mask(lengths, b, t)
        last = np.asarray(lengths, dtype=np.int64) - 1
    rows = np.arange(b)
    out = h.data[rows, last]

    def backward(g):
        full = np.zeros(h.shape)
        full[rows, last] = g
        return (full,)

    return _result(out, (h,), backward, "seq_last")


# -- normalisation ---------------------------------------------------------------

def batchnorm1d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Batch normalisation over axis 0 of a (B, F) input.

    In training mode the running statistics arrays are updated in place with
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = _inputs("batchnorm1d", x, gamma, beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(
            f"batchnorm1d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    if training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        n = x.shape[0]
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        unbiased = var * n / max(n - 1, 1)
        running_var *= momentum
        running_var += (1.0 - momentum) * unbiased
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        if training:
            dx = inv_std * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), backward, "batchnorm1d")


# -- convolution -------------------------------------------------------------

def conv2d(x, weight, bias=None, padding: str | int = "same", layout: str = "NCHW") -> Tensor:
    """2-d cross-correlation, stride 1.

    ``x`` is (B, C, H, W), ``weight`` is (O, C, K, K). ``padding`` is "same"
    (odd K), "valid", or an explicit integer. With ``layout="CNHW"`` input and
    output are channel-major (C, B, H, W), which avoids transposes when layers
    are chained.
    """
    if layout not in ("NCHW", "CNHW"):
        raise ValueError(f"unknown layout {layout!r}")
    cm = layout == "CNHW"
    parents = [x, weight] + ([bias] if bias is not None else [])
    ts = _inputs("conv2d", *parents)
    x, weight = ts[0], ts[1]
    bias = ts[2] if bias is not None else None
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    if cm:
        c, b, h, w = x.shape
    else:
        b, c, h, w = x.shape
    o, c2, kh, kw = weight.shape
    if c != c2:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, weight expects {c2}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({o},)")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError("'same' padding needs an odd kernel")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        ph = pw = int(padding)
    xc = x.data if cm else x.data.transpose(1, 0, 2, 3)
    xp = np.pad(xc, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xc
    oh, ow = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    # channel-major im2col: rows (c, ki, kj), columns (b, y, x)
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.empty((c, kh * kw, b, oh, ow))
    for k, (i, j) in enumerate(offsets):
        cols[:, k] = xp[:, :, i:i + oh, j:j + ow]
    cols = cols.reshape(c * kh * kw, b * oh * ow)
    wmat = weight.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(o, b, oh, ow)
    if not cm:
        out = out.transpose(1, 0, 2, 3)

    def backward(g):
        gmat = (g if cm else g.transpose(1, 0, 2, 3)).reshape(o, -1)
        dw = (gmat @ cols.T).reshape(weight.shape)
        grads = [None, dw]
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(c, kh * kw, b, oh, ow)
            dxp = np.zeros(xp.shape)
            for k, (i, j) in enumerate(offsets):
                dxp[:, :, i:i + oh, j:j + ow] += dcols[:, k]
            dx = dxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else dxp
            grads[0] = dx if cm else dx.transpose(1, 0, 2, 3)
        if bias is not None:
            grads.append(gmat.sum(axis=1))
        return tuple(grads)

    return _result(out, tuple(ts), backward, "conv2d")


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping ``size`` x ``size`` max pooling over the last two axes.

    Works for (B, C, H, W) and channel-major (C, B, H, W) alike. Ties send the
    gradient to the first window position in row-major order.
    """
    (x,) = _inputs("maxpool2d", x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects a 4-d input, got {x.shape}")
    h, w = x.shape[2:]
    if h % size or w % size:
        raise DimensionError(f"maxpool2d: spatial dims {h}x{w} not divisible by {size}")
    views = [x.data[:, :, i::size, j::size] for i in range(size) for j in range(size)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def backward(g):
        full = np.zeros(x.shape)
        taken = np.zeros(out.shape, dtype=bool)
        for k, v in enumerate(views):
            hit = (v == out) & ~taken
            taken |= hit
            i, j = divmod(k, size)
            full[:, :, i::size, j::size] = g * hit
        return (full,)

    return _result(out, (x,), backward, "maxpool2d")


# -- recurrence ----------------------------------------------------------------

def gru_recurrence(proj, m_z, m_r, m_c) -> Tensor:
    """All hidden states of the update-gate-on-candidate GRU, as one graph node.

    ``proj`` (B, T, 3D) holds the input projections ``[L_z x_j, L_r x_j,
    L_c x_j]``; ``m_*`` are (D, D) recurrent matrices. With ``h_0 = 0``::

        z = sigmoid(h M_z^T + pz);  r = sigmoid(h M_r^T + pr)
        c = tanh((r * h) M_c^T + pc);  h' = z * c + (1 - z) * h

    Returns (B, T, D). Equivalent to chaining the elementwise ops; fusing
    avoids per-step slicing nodes.
    """
    proj, m_z, m_r, m_c = _inputs("gru_recurrence", proj, m_z, m_r, m_c)
    if proj.ndim != 3:
        raise DimensionError(f"gru_recurrence expects (B, T, 3D) projections, got {proj.shape}")
    b, t, d3 = proj.shape
    d = d3 // 3
    if d3 != 3 * d or any(m.shape != (d, d) for m in (m_z, m_r, m_c)):
        raise DimensionError(
            f"gru_recurrence: projections {proj.shape} vs recurrent {m_z.shape}, {m_r.shape}, {m_c.shape}")
    mzr = np.concatenate([m_z.data, m_r.data], axis=0)  # (2D, D)
    hs = np.zeros((b, t, d))
    zs, rs, cs = (np.empty((b, t, d)) for _ in range(3))
    h = np.zeros((b, d))
    for j in range(t):
        pre = h @ mzr.T
        z = _sigmoid(pre[:, :d] + proj.data[:, j, :d])
        r = _sigmoid(pre[:, d:] + proj.data[:, j, d:2 * d])
        c = np.tanh((r * h) @ m_c.data.T + proj.data[:, j, 2 * d:])
        h = z * c + (1.0 - z) * h
        zs[:, j], rs[:, j], cs[:, j], hs[:, j] = z, r, c, h

    def backward(g):
        dproj = np.empty(proj.shape)
        dmz, dmr, dmc = np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d))
        dh_next = np.zeros((b, d))
        for j in range(t - 1, -1, -1):
            dh = g[:, j] + dh_next
            h_prev = hs[:, j - 1] if j > 0 else np.zeros((b, d))
            z, r, c = zs[:, j], rs[:, j], cs[:, j]
            dz = dh * (c - h_prev)
            dac = dh * z * (1.0 - c * c)
            dh_prev = dh * (1.0 - z)
            rh = r * h_prev
            dmc += dac.T @ rh
            drh = dac @ m_c.data
            dar = drh * h_prev * r * (1.0 - r)
            dh_prev += drh * r
            daz = dz * z * (1.0 - z)
            dmz += daz.T @ h_prev
            dmr += dar.T @ h_prev
            dh_prev += daz @ m_z.data + dar @ m_r.data
            dproj[:, j, :d] = daz
            dproj[:, j, d:2 * d] = dar
            dproj[:, j, 2 * d:] = dac
            dh_next = dh_prev
        return dproj, dmz, dmr, dmc

    return _result(hs, (proj, m_z, m_r, m_c), backward, "gru_recurrence")


# -- loss ------------------------------------------------------------------------

def bce_with_logits(logits, targets) -> Tensor:
    """Mean sigmoid cross-entropy; ``targets`` carries no gradient."""
    logits, targets = _inputs("bce_with_logits", logits, targets)
    if logits.shape != targets.shape:
        raise DimensionError(f"bce_with_logits: logits {logits.shape} vs targets {targets.shape}")
    z, y = logits.data, targets.data
    n = z.size
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        return float(g) * (_sigmoid(z) - y) / n, None

    return _result(np.asarray(losses.mean()), (logits, targets), backward, "bce_with_logits")
