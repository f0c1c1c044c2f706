"""Sequence cores (causal attention, selective SSM, sLSTM-style cell) and the X-Block."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import AdaLNModulation, FeedForward, Linear, Module, adaln_modulate
from .tensor import NumericDomainError, ShapeError, Tensor, apply_op

BACKBONES = ("transformer", "mamba", "xlstm")
_ALIASES = {"attention": "transformer", "ssm": "mamba"}

# Feed-forward width multiplier per backbone. The recurrent cores already carry
# wide inner projections, so their FF is narrower; this keeps 6 transformer
# blocks and 8 mamba/xlstm blocks at comparable parameter counts.
FF_RATIO = {"transformer": 4.0, "mamba": 4.0 / 3.0, "xlstm": 4.0 / 3.0}


def canonical_backbone(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in BACKBONES:
        raise ValueError(f"unknown backbone {name!r}; valid options: {{{', '.join(BACKBONES)}}}")
    return name


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

class SelfAttention(Module):
    """Multi-head self-attention with optional causal masking."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, causal: bool = True):
        if d % n_heads:
            raise ValueError(f"embed dim {d} not divisible by {n_heads} heads")
        self.d, self.n_heads, self.causal = d, n_heads, causal
        self.q = Linear(d, d, rng)
        # a key bias shifts every score of a query equally, so softmax ignores it
        self.k = Linear(d, d, rng, bias=False)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return causal_self_attention(self, x) if self.causal else self_attention(self, x, None)


def _split_heads(t: Tensor, b: int, L: int, h: int, dh: int) -> Tensor:
    return t.reshape(b, L, h, dh).transpose(0, 2, 1, 3)


def self_attention(p: SelfAttention, x: Tensor, mask: np.ndarray | None) -> Tensor:
    b, L, d = x.shape
    h = p.n_heads
    dh = d // h
    q = _split_heads(p.q(x), b, L, h, dh)
    k = _split_heads(p.k(x), b, L, h, dh)
    v = _split_heads(p.v(x), b, L, h, dh)
    scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / float(np.sqrt(dh)))
    attn = T.softmax(scores, axis=-1, mask=mask)
    o = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, L, d)
    return p.out(o)


def causal_self_attention(p: SelfAttention, x: Tensor) -> Tensor:
    """Position t attends to positions <= t only."""
    L = x.shape[1]
    return self_attention(p, x, np.tril(np.ones((L, L), dtype=bool)))


# ---------------------------------------------------------------------------
# selective state-space scan
# ---------------------------------------------------------------------------

def selective_scan(delta, A, B, C, x, D) -> Tensor:
    """Input-dependent linear recurrence, evaluated in one fused op.

    Shapes: delta, x [b, L, di]; A [di, n]; B, C [b, L, n]; D [di].
    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t  (h_0 = 0)
    y_t = <C_t, h_t> + D * x_t
    """
    delta, A, B, C, x, D = (T.as_tensor(v) for v in (delta, A, B, C, x, D))
    b, L, di = x.shape
    n = A.shape[1]
    if delta.shape != x.shape or B.shape != (b, L, n) or C.shape != (b, L, n) \
            or A.shape != (di, n) or D.shape != (di,):
        raise ShapeError("selective_scan: inconsistent shapes "
                         f"delta{delta.shape} A{A.shape} B{B.shape} C{C.shape} x{x.shape} D{D.shape}")
    dl, Ad, Bd, Cd, xd, Dd = delta.data, A.data, B.data, C.data, x.data, D.data
    decay = np.exp(dl[..., None] * Ad)                    # [b, L, di, n]
    drive = (dl * xd)[..., None] * Bd[:, :, None, :]      # [b, L, di, n]
    hs = np.empty_like(decay)
    h = np.zeros((b, di, n), dtype=decay.dtype)
    for t in range(L):
        h = decay[:, t] * h + drive[:, t]
        hs[:, t] = h
    if not np.all(np.isfinite(h)):
        raise NumericDomainError("selective_scan produced a non-finite state")
    y = np.matmul(hs, Cd[..., None])[..., 0] + Dd * xd

    def backward(g):
        gD = (g * xd).sum(axis=(0, 1))
        gx = g * Dd
        gC = np.matmul(g[:, :, None, :], hs)[:, :, 0]
        ghs = np.empty_like(hs)
        carry = np.zeros((b, di, n), dtype=hs.dtype)
        for t in range(L - 1, -1, -1):
            carry = g[:, t, :, None] * Cd[:, t, None, :] + carry
            ghs[:, t] = carry
            carry = carry * decay[:, t]
        # d/d(delta*A); h_0 = 0 so the first step contributes nothing
        g_pre = np.zeros_like(hs)
        np.multiply(ghs[:, 1:], hs[:, :-1], out=g_pre[:, 1:])
        g_pre *= decay
        gdelta = (g_pre * Ad).sum(-1)
        gA = np.einsum("bldn,bld->dn", g_pre, dl, optimize=True)
        gB_x = np.matmul(ghs, Bd[..., None])[..., 0]      # sum_n gh * B
        gdelta = gdelta + gB_x * xd
        gx = gx + gB_x * dl
        gB = np.matmul((dl * xd)[:, :, None, :], ghs)[:, :, 0]
        return gdelta, gA, gB, gC, gx, gD

    return apply_op("selective_scan", y, (delta, A, B, C, x, D), backward)


def causal_depthwise_conv(x, w, bias) -> Tensor:
    """Per-channel causal convolution: out_t = sum_k w[:, k] * x_{t-K+1+k} + bias."""
    x, w, bias = T.as_tensor(x), T.as_tensor(w), T.as_tensor(bias)
    b, L, c = x.shape
    K = w.shape[1]
    if w.shape[0] != c or bias.shape != (c,):
        raise ShapeError(f"conv weight {w.shape} / bias {bias.shape} do not match {c} channels")
    xp = np.pad(x.data, ((0, 0), (K - 1, 0), (0, 0)))
    wd = w.data
    y = np.broadcast_to(bias.data, (b, L, c)).copy()
    for k in range(K):
        y += xp[:, k:k + L] * wd[:, k]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for k in range(K):
            gxp[:, k:k + L] += g * wd[:, k]
            gw[:, k] = (g * xp[:, k:k + L]).sum(axis=(0, 1))
        return gxp[:, K - 1:], gw, g.sum(axis=(0, 1))

    return apply_op("causal_conv", y, (x, w, bias), backward)


class MambaLayer(Module):
    """Selective SSM layer: gated branch, causal conv, data-dependent scan."""

    def __init__(self, d: int, rng: np.random.Generator, d_state: int = 16, expand: int = 2,
                 conv_width: int = 4, dt_rank: int | None = None):
        di = expand * d
        self.d, self.d_inner, self.d_state = d, di, d_state
        self.dt_rank = dt_rank or max(1, -(-d // 16))
        self.in_proj = Linear(d, 2 * di, rng, bias=False)
        bound = 1.0 / np.sqrt(conv_width)
        self.conv_w = Tensor(rng.uniform(-bound, bound, (di, conv_width)), requires_grad=True)
        self.conv_b = Tensor(rng.uniform(-bound, bound, di), requires_grad=True)
        self.x_proj = Linear(di, self.dt_rank + 2 * d_state, rng, bias=False)
        self.dt_proj = Linear(self.dt_rank, di, rng)
        # step sizes start log-uniform in [1e-3, 1e-1]
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), di))
        self.dt_proj.bias.data = (dt + np.log(-np.expm1(-dt))).astype(T.get_dtype())
        self.A_log = Tensor(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (di, 1))),
                            requires_grad=True)
        self.D = Tensor(np.ones(di), requires_grad=True)
        self.out_proj = Linear(di, d, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        di, n, R = self.d_inner, self.d_state, self.dt_rank
        xz = self.in_proj(x)
        xs, z = xz[..., :di], xz[..., di:]
        xs = T.silu(causal_depthwise_conv(xs, self.conv_w, self.conv_b))
        dbc = self.x_proj(xs)
        delta = T.softplus(self.dt_proj(dbc[..., :R]))
        B, C = dbc[..., R:R + n], dbc[..., R + n:]
        A = -T.exp(self.A_log)
        y = selective_scan(delta, A, B, C, xs, self.D)
        return self.out_proj(y * T.silu(z))


# ---------------------------------------------------------------------------
# sLSTM-style cell with exponential gating
# ---------------------------------------------------------------------------

M_INIT = -1e30  # stands in for -inf in the stabilizer state


def xlstm_cell_step(state, i_pre, f_pre, o_pre, z_pre):
    """One stabilized exponential-gating step on plain arrays.

    ``state = (c, n, m)``; ``f_pre`` is the log forget gate. Returns
    ``(new_state, h)``.
    """
    c, n, m = state
    m_new = np.maximum(f_pre + m, i_pre)
    i_g = np.exp(i_pre - m_new)
    f_g = np.exp(f_pre + m - m_new)
    c_new = f_g * c + i_g * np.tanh(z_pre)
    n_new = f_g * n + i_g
    if np.any(n_new <= 0):
        raise NumericDomainError("xLSTM normalizer reached zero")
    h = T._sigmoid(o_pre) * c_new / n_new
    return (c_new, n_new, m_new), h


def xlstm_initial_state(shape, dtype=None):
    dtype = dtype or T.get_dtype()
    return (np.zeros(shape, dtype), np.zeros(shape, dtype), np.full(shape, M_INIT, dtype))


def xlstm_scan(i_pre, f_pre, o_pre, z_pre) -> Tensor:
    """Run the cell over [b, L, d] gate pre-activations as one fused op.

    The stabilizer m cancels in h = c / n, so the backward pass treats it as a
    constant without approximation.
    """
    ti, tf, to, tz = (T.as_tensor(v) for v in (i_pre, f_pre, o_pre, z_pre))
    b, L, d = ti.shape
    for t_ in (tf, to, tz):
        if t_.shape != ti.shape:
            raise ShapeError(f"xlstm_scan: gate shapes differ {ti.shape} vs {t_.shape}")
    ip_, fp_, op_, zp_ = ti.data, tf.data, to.data, tz.data
    ig = np.empty_like(ip_)
    fg = np.empty_like(ip_)
    cs = np.empty_like(ip_)
    ns = np.empty_like(ip_)
    c, n, m = xlstm_initial_state((b, d), ip_.dtype)
    for t in range(L):
        m_new = np.maximum(fp_[:, t] + m, ip_[:, t])
        ig[:, t] = np.exp(ip_[:, t] - m_new)
        fg[:, t] = np.exp(fp_[:, t] + m - m_new)
        c = fg[:, t] * c + ig[:, t] * np.tanh(zp_[:, t])
        n = fg[:, t] * n + ig[:, t]
        cs[:, t], ns[:, t] = c, n
        m = m_new
    if np.any(ns <= 0):
        raise NumericDomainError("xLSTM normalizer reached zero")
    zt = np.tanh(zp_)
    s = T._sigmoid(op_)
    ratio = cs / ns
    h = s * ratio

    def backward(g):
        go = g * ratio * s * (1 - s)
        gi = np.empty_like(g)
        gf = np.empty_like(g)
        gz = np.empty_like(g)
        gc_next = np.zeros((b, d), dtype=g.dtype)
        gn_next = np.zeros((b, d), dtype=g.dtype)
        for t in range(L - 1, -1, -1):
            gs = g[:, t] * s[:, t] / ns[:, t]
            gc = gs + gc_next
            gn = -gs * ratio[:, t] + gn_next
            if t > 0:
                gf[:, t] = (gc * cs[:, t - 1] + gn * ns[:, t - 1]) * fg[:, t]
            else:
                gf[:, t] = 0.0
            gi[:, t] = (gc * zt[:, t] + gn) * ig[:, t]
            gz[:, t] = gc * ig[:, t] * (1 - zt[:, t] ** 2)
            gc_next = gc * fg[:, t]
            gn_next = gn * fg[:, t]
        return gi, gf, go, gz

    return apply_op("xlstm_scan", h, (ti, tf, to, tz), backward)


class XLSTMLayer(Module):
    """Scalar-memory xLSTM layer; gates are projected from the input only.

    The input gate has no bias: a constant shift of every input-gate
    pre-activation scales c and n alike and cancels in h = c / n.
    """

    def __init__(self, d: int, rng: np.random.Generator, forget_bias: float = 3.0):
        self.d = d
        self.gates = Linear(d, 4 * d, rng, bias=False)
        bias = rng.uniform(-1.0, 1.0, 3 * d) / np.sqrt(d)
        bias[:d] = forget_bias
        self.gate_bias = Tensor(bias, requires_grad=True)

    def _preacts(self, x: Tensor):
        d = self.d
        g = self.gates(x)
        fo_z = g[..., d:] + self.gate_bias
        return (g[..., :d], T.logsigmoid(fo_z[..., :d]), fo_z[..., d:2 * d], fo_z[..., 2 * d:])

    def forward(self, x: Tensor) -> Tensor:
        return xlstm_scan(*self._preacts(x))

    def step(self, state, x_t: np.ndarray):
        """Advance one timestep for an input of shape [b, d] (no tape)."""
        i, f, o, z = (v.data for v in self._preacts(Tensor(x_t)))
        return xlstm_cell_step(state, i, f, o, z)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def make_layer(backbone: str, d: int, rng: np.random.Generator, n_heads: int = 8,
               causal: bool = True, d_state: int = 16) -> Module:
    backbone = canonical_backbone(backbone)
    if backbone == "transformer":
        return SelfAttention(d, n_heads, rng, causal=causal)
    if backbone == "mamba":
        return MambaLayer(d, rng, d_state=d_state)
    return XLSTMLayer(d, rng)


class XBlock(Module):
    """Two AdaLN-modulated residual sublayers: the sequence core, then an MLP.

    The modulation MLP is zero-initialized, so a fresh block is the identity.
    """

    def __init__(self, backbone: str, d: int, cond_dim: int, rng: np.random.Generator,
                 n_heads: int = 8, ff_ratio: float | None = None, causal: bool = True,
                 d_state: int = 16):
        self.backbone = canonical_backbone(backbone)
        ratio = FF_RATIO[self.backbone] if ff_ratio is None else ff_ratio
        self.layer = make_layer(self.backbone, d, rng, n_heads=n_heads, causal=causal,
                                d_state=d_state)
        self.ff = FeedForward(d, max(1, int(round(ratio * d))), rng)
        self.adaln = AdaLNModulation(cond_dim, d, rng)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        f = self.adaln(cond)
        x = adaln_modulate(x, *f.first(), self.layer)
        return adaln_modulate(x, *f.second(), self.ff)


class TransformerBlock(Module):
    """Plain pre-norm attention block, used inside observation encoders."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, ff_ratio: float = 4.0,
                 causal: bool = False):
        self.attn = SelfAttention(d, n_heads, rng, causal=causal)
        self.ff = FeedForward(d, int(round(ff_ratio * d)), rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(T.layer_norm(x, eps=1e-6))
        return x + self.ff(T.layer_norm(x, eps=1e-6))
