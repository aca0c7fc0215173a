"""Neural-network layers and the Adam optimizer on top of the tensor core.

Convolution and pooling accept either a single (C,H,W) map or a batched
(B,C,H,W) stack; linear and attention operate on trailing dimensions.
All layers are differentiable through `Tensor.backward()`.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import ShapeError, Tensor, _as_tensor, matmul, reshape, softmax, transpose


def _pair(v) -> tuple:
    return tuple(v) if isinstance(v, (tuple, list)) else (int(v), int(v))


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int):
    """(B,C,Hp,Wp) -> (B*Ho*Wo, C*kh*kw) patch matrix plus output dims."""
    B, C, Hp, Wp = xp.shape
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]  # (B, C, Ho, Wo, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    return np.ascontiguousarray(cols), Ho, Wo


def _col2im(gcols: np.ndarray, x_shape, kh, kw, sh, sw, ph, pw, Ho, Wo):
    """Scatter-add column gradients back onto the padded input grid."""
    B, C, H, W = x_shape
    buf = np.zeros((B, C, H + 2 * ph, W + 2 * pw))
    g6 = gcols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += g6[:, :, :, :, i, j]
    if ph or pw:
        buf = buf[:, :, ph : ph + H, pw : pw + W]
    return buf


def conv2d(x, kernel, bias=None, padding=0, stride=1) -> Tensor:
    """Cross-correlation of (B,C,H,W) or (C,H,W) with an (O,C,kh,kw) kernel."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 3 or 4, got {x.data.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank 4, got {kernel.data.shape}")
    B, C, H, W = xd.shape
    O, Ck, kh, kw = kernel.data.shape
    if Ck != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, kernel expects {Ck}")
    ph, pw = _pair(padding)
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {(sh, sw)}")
    if kh > H + 2 * ph or kw > W + 2 * pw:
        raise ShapeError(
            f"conv2d kernel ({kh},{kw}) exceeds padded input ({H + 2 * ph},{W + 2 * pw})"
        )
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (O,):
            raise ShapeError(f"conv2d bias must have shape ({O},), got {bias.data.shape}")

    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    cols, Ho, Wo = _im2col(xp, kh, kw, sh, sw)
    wmat = kernel.data.reshape(O, C * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    data = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    if squeeze:
        data = data[0]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gd = g[None] if squeeze else g
        gmat = gd.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        if bias is not None and bias.requires_grad:
            bias._accumulate(gmat.sum(axis=0))
        if kernel.requires_grad:
            kernel._accumulate((gmat.T @ cols).reshape(kernel.data.shape))
        if x.requires_grad:
            gcols = gmat @ wmat
            gx = _col2im(gcols, (B, C, H, W), kh, kw, sh, sw, ph, pw, Ho, Wo)
            x._accumulate(gx[0] if squeeze else gx)

    return Tensor._make(data, parents, backward)


def maxpool2d(x, window, stride=None) -> Tensor:
    """Per-window maximum; the gradient routes to the first-index argmax."""
    x = _as_tensor(x)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"maxpool2d input must be rank 3 or 4, got {x.data.shape}")
    ph, pw = _pair(window)
    sh, sw = _pair(stride) if stride is not None else (ph, pw)
    B, C, H, W = xd.shape
    if ph > H or pw > W:
        raise ShapeError(f"maxpool2d window ({ph},{pw}) exceeds input ({H},{W})")
    Ho = (H - ph) // sh + 1
    Wo = (W - pw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(xd, (ph, pw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw].reshape(B, C, Ho, Wo, ph * pw)
    arg = win.argmax(axis=-1)  # first index wins on ties
    data = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    out = data[0] if squeeze else data

    def backward(g):
        if not x.requires_grad:
            return
        gd = g[None] if squeeze else g
        if sh == ph and sw == pw:
            # non-overlapping windows: scatter straight into the tiling
            gwin = np.zeros((B, C, Ho, Wo, ph * pw))
            np.put_along_axis(gwin, arg[..., None], gd[..., None], axis=-1)
            tile = gwin.reshape(B, C, Ho, Wo, ph, pw).transpose(0, 1, 2, 4, 3, 5)
            buf = np.zeros((B, C, H, W))
            buf[:, :, : Ho * ph, : Wo * pw] = tile.reshape(B, C, Ho * ph, Wo * pw)
        else:
            hh = arg // pw
            ww = arg % pw
            oh = np.arange(Ho)[None, None, :, None] * sh
            ow = np.arange(Wo)[None, None, None, :] * sw
            habs = (hh + oh).ravel()
            wabs = (ww + ow).ravel()
            bidx = np.repeat(np.arange(B), C * Ho * Wo)
            cidx = np.tile(np.repeat(np.arange(C), Ho * Wo), B)
            buf = np.zeros((B, C, H, W))
            np.add.at(buf, (bidx, cidx, habs, wabs), gd.ravel())
        x._accumulate(buf[0] if squeeze else buf)

    return Tensor._make(out, (x,), backward)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map over the trailing dimension: x @ weight.T + bias."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.data.ndim != 2:
        raise ShapeError(f"linear weight must be rank 2, got {weight.data.shape}")
    dout, din = weight.data.shape
    if x.data.shape[-1] != din:
        raise ShapeError(
            f"linear input trailing dim {x.data.shape[-1]} != weight Din {din}"
        )
    out = matmul(x, transpose(weight))
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (dout,):
            raise ShapeError(f"linear bias must have shape ({dout},), got {bias.data.shape}")
        out = out + bias
    return out


def attention_block(query, key, value, heads: int, out_weight, out_bias=None) -> Tensor:
    """Multi-head scaled dot-product attention with an output projection.

    query: (..., Lq, D); key/value: (..., Lk, D).  Each head attends with
    1/sqrt(D/heads) scaling; head outputs are concatenated and projected
    by `out_weight` ((D, D), applied as linear).
    """
    query, key, value = _as_tensor(query), _as_tensor(key), _as_tensor(value)
    D = query.data.shape[-1]
    if D % heads != 0:
        raise ShapeError(f"model dim {D} not divisible by {heads} heads")
    if key.data.shape[-1] != D or value.data.shape[-1] != D:
        raise ShapeError("query/key/value trailing dims disagree")
    if key.data.shape[-2] != value.data.shape[-2]:
        raise ShapeError("key and value sequence lengths disagree")
    dk = D // heads
    lead = query.data.shape[:-2]
    Lq = query.data.shape[-2]
    Lk = key.data.shape[-2]

    def split_heads(t, L):
        t = reshape(t, lead + (L, heads, dk))
        perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return transpose(t, perm)  # (..., heads, L, dk)

    q = split_heads(query, Lq)
    k = split_heads(key, Lk)
    v = split_heads(value, Lk)
    kt = transpose(k, tuple(range(len(lead))) + (len(lead), len(lead) + 2, len(lead) + 1))
    scores = matmul(q, kt) * (1.0 / math.sqrt(dk))
    weights = softmax(scores, axis=-1)
    attended = matmul(weights, v)  # (..., heads, Lq, dk)
    perm_back = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    merged = reshape(transpose(attended, perm_back), lead + (Lq, D))
    return linear(merged, out_weight, out_bias)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing dimension to zero mean / unit variance."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    D = x.data.shape[-1]
    if gamma.data.shape != (D,) or beta.data.shape != (D,):
        raise ShapeError(f"layer_norm affine params must have shape ({D},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, D).sum(axis=0))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, D).sum(axis=0))
        if x.requires_grad:
            gx_hat = g * gamma.data
            m1 = gx_hat.mean(axis=-1, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gx_hat - m1 - xhat * m2))

    return Tensor._make(data, (x, gamma, beta), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup into (V, D) `table` by an integer id array."""
    table = _as_tensor(table)
    idx = np.asarray(ids)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding id out of range [0, {table.data.shape[0]}): "
            f"min {idx.min()}, max {idx.max()}"
        )
    data = table.data[idx]

    def backward(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, idx, g)
            table._accumulate(buf)

    return Tensor._make(data, (table,), backward)


# -- initialization ----------------------------------------------------------


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    bound = math.sqrt(3.0) / math.sqrt(fan_in) if fan_in > 0 else 0.0
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def normal_init(shape, std: float, rng: np.random.Generator) -> Tensor:
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True)


def zeros_init(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


# -- optimizer ----------------------------------------------------------------


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Cosine annealing from base_lr at step 0 to min_lr at total_steps."""
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps) / total_steps
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t))


class OptimizerState:
    """Adam moment buffers plus the cosine learning-rate schedule."""

    def __init__(self, params, base_lr: float, total_steps: int,
                 betas=(0.9, 0.999), eps: float = 1e-8, min_lr: float = 0.0):
        self.params = list(params)
        self.base_lr = base_lr
        self.min_lr = min_lr
        self.total_steps = total_steps
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        return cosine_lr(self.step_count, self.total_steps, self.base_lr, self.min_lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(state: OptimizerState):
    """One Adam update with bias correction at the scheduled learning rate."""
    lr = state.current_lr()
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(state.params, state.m, state.v):
        if p.grad is None:
            continue
        g = p.grad
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return lr
