"""Fused neural-network ops with hand-written backward passes."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DataError, DimensionError
from .tensor import Tensor, as_tensor, make


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    # xp is already padded: (N, C, Hp, Wp) -> (N, C*kh*kw, Ho*Wo).
    # Copying in this order moves contiguous image rows, which is much faster
    # than the (N*Ho*Wo, C*kh*kw) layout for NCHW data.
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return cols, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input with zero padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input and weight, got input ndim={x.ndim}, weight ndim={weight.ndim}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d channel axis mismatch: input axis 1 = {c}, weight axis 1 = {ci}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp} (axes 2, 3)")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wmat = weight.data.reshape(o, -1)
    if kh == kw == 1 and stride == 1:
        cols, ho, wo = xd.reshape(n, c, h * w), h, w
    else:
        cols, ho, wo = _im2col(xd, kh, kw, stride)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, o, ho, wo)

    def backward(g):
        gm = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.zeros_like(wmat)
            for k in range(n):
                gw += gm[k] @ cols[k].T
            gw = gw.reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gm)
            if kh == kw == 1 and stride == 1:
                gx = gcols.reshape(x.shape)
            else:
                gcols = gcols.reshape(n, c, kh, kw, ho, wo)
                gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out, parents, backward)


def conv2d_nhwc(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last convolution; ``weight`` keeps the (O, C, kh, kw) layout.

    Stride-1 kernels run as kh*kw GEMMs over row-offset views of the flattened
    padded input, so no im2col buffer is built.  Rows that straddle an image
    border land outside the kept (Ho, Wo) window and are dropped.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input and weight, got input ndim={x.ndim}, weight ndim={weight.ndim}")
    n, h, w, c = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d channel axis mismatch: input axis 3 = {c}, weight axis 1 = {ci}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp} (axes 1, 2)")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    wt = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # (kh, kw, C, O)

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0)))

    if kh == kw == 1 and stride == 1:
        out = (xd.reshape(-1, c) @ wt[0, 0]).reshape(n, ho, wo, o)
        mode = "pointwise"
    elif stride == 1:
        xf = xd.reshape(-1, c)
        span = xf.shape[0] - (kh - 1) * wp - (kw - 1)
        full = np.empty((n * hp * wp, o), dtype=xd.dtype)
        acc = full[:span]
        np.matmul(xf[:span], wt[0, 0], out=acc)
        for i in range(kh):
            for j in range(kw):
                if i or j:
                    off = i * wp + j
                    acc += xf[off:off + span] @ wt[i, j]
        out = np.ascontiguousarray(full.reshape(n, hp, wp, o)[:, :ho, :wo])
        mode = "shifted"
    else:
        cols = np.empty((n, ho, wo, kh, kw, c), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j] = xd[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
        cols = cols.reshape(-1, kh * kw * c)
        out = (cols @ wt.reshape(-1, o)).reshape(n, ho, wo, o)
        mode = "im2col"
    if bias is not None:
        out += bias.data

    def backward(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = _colsum(g.reshape(-1, o))
        if mode == "pointwise":
            gf = g.reshape(-1, o)
            if weight.requires_grad:
                gw = (xd.reshape(-1, c).T @ gf).T.reshape(o, c, 1, 1)
            if x.requires_grad:
                gx = (gf @ wt[0, 0].T).reshape(x.shape)
            return gx, gw, gb
        if mode == "shifted":
            gfull = np.zeros((n, hp, wp, o), dtype=g.dtype)
            gfull[:, :ho, :wo] = g
            gf = gfull.reshape(-1, o)[:span]
            if weight.requires_grad:
                gwt = np.empty_like(wt)
                for i in range(kh):
                    for j in range(kw):
                        off = i * wp + j
                        gwt[i, j] = xf[off:off + span].T @ gf
                gw = gwt.transpose(3, 2, 0, 1)
            if x.requires_grad:
                gxp = np.zeros((n * hp * wp, c), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        off = i * wp + j
                        gxp[off:off + span] += gf @ wt[i, j].T
                gxp = gxp.reshape(n, hp, wp, c)
                gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
            return gx, gw, gb
        gf = g.reshape(-1, o)
        if weight.requires_grad:
            gw = (cols.T @ gf).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
        if x.requires_grad:
            gcols = (gf @ wt.reshape(-1, o).T).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, i, j]
            gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out, parents, backward)


def _colsum(a: np.ndarray) -> np.ndarray:
    # Sum over axis -2 via GEMV; several times faster than ndarray.sum(axis=-2).
    return np.matmul(np.ones(a.shape[-2], dtype=a.dtype), a)


def group_norm_nhwc(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, h, w, c = x.shape
    if c % num_groups:
        raise DimensionError(f"group_norm: {c} channels not divisible into {num_groups} groups")
    cg = c // num_groups
    count = h * w * cg
    xr = x.data.reshape(n, h * w, c)

    def per_group(chan):  # (n, c) channel sums -> (n, 1, c) group means
        return np.repeat(chan.reshape(n, num_groups, cg).sum(-1) / count, cg, axis=1)[:, None, :]

    xc = xr - per_group(_colsum(xr))
    var = per_group(np.einsum("nkc,nkc->nc", xc, xc))
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def backward(g):
        gr = g.reshape(n, h * w, c)
        ggamma = np.einsum("nkc,nkc->c", gr, xhat)
        gbeta = _colsum(gr).sum(axis=0)
        dxhat = gr * gamma.data
        gx = inv * (dxhat - per_group(_colsum(dxhat))
                    - xhat * per_group(np.einsum("nkc,nkc->nc", dxhat, xhat)))
        return gx.reshape(x.shape), ggamma, gbeta

    return make(out, (x, gamma, beta), backward)


def upsample_nearest_nhwc(x: Tensor, factor: int = 2) -> Tensor:
    n, h, w, c = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :], (n, h, factor, w, factor, c)).reshape(
        n, h * factor, w * factor, c)

    def backward(g):
        return (g.reshape(n, h, factor, w, factor, c).sum(axis=(2, 4)),)

    return make(out, (x,), backward)


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if c % num_groups:
        raise DimensionError(f"group_norm: {c} channels not divisible into {num_groups} groups")
    xg = x.data.reshape(n, num_groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = (g * gamma.data.reshape(1, c, 1, 1)).reshape(n, num_groups, -1)
        xh = xhat.reshape(n, num_groups, -1)
        gx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                    - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return gx.reshape(x.shape), ggamma, gbeta

    return make(out, (x, gamma, beta), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight.transpose(1, 0)
    return out + bias if bias is not None else out


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gp = g * 2.0 * diff / n
        return gp, -gp

    return make(np.asarray(np.mean(diff * diff), dtype=pred.dtype), (pred, target), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean pixel-wise cross-entropy of (N, K, H, W) logits against (N, H, W) labels."""
    lab = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    k = logits.shape[1]
    if lab.shape != logits.shape[:1] + logits.shape[2:]:
        raise DimensionError(f"cross_entropy: labels {lab.shape} vs logits {logits.shape}")
    if not np.all(np.isin(lab, np.arange(k))):
        bad = np.unique(lab[~np.isin(lab, np.arange(k))])[:5]
        raise DataError(f"labels must lie in 0..{k - 1}, found {bad.tolist()}")
    lab = lab.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    onehot = np.moveaxis(np.eye(k, dtype=logits.dtype)[lab], -1, 1)
    count = lab.size
    loss = -(logp * onehot).sum() / count

    def backward(g):
        return (g * (np.exp(logp) - onehot) / count,)

    return make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
