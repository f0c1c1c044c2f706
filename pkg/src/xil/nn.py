"""Shared neural building blocks: modules, linear layers, embeddings, FiLM, AdaLN."""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError, NumericDomainError


class Module:
    """Container that discovers parameters from its attributes.

    Parameters are ``Tensor`` attributes with ``requires_grad``; sub-modules may
    be attributes or lists of modules. Discovery follows attribute insertion
    order so parameter names and ordering are deterministic.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    """y = x W^T + b with W stored as [out, in].

    ``init="uniform"`` draws weight and bias from U(-1/sqrt(in), 1/sqrt(in));
    ``init="zeros"`` makes both exactly zero.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 init: str = "uniform"):
        self.d_in, self.d_out = d_in, d_out
        if init == "uniform":
            bound = 1.0 / np.sqrt(d_in)
            self.weight = _param(rng.uniform(-bound, bound, (d_out, d_in)))
            self.bias = _param(rng.uniform(-bound, bound, d_out)) if bias else None
        elif init == "zeros":
            self.weight = _param(np.zeros((d_out, d_in)))
            self.bias = _param(np.zeros(d_out)) if bias else None
        else:
            raise ValueError(f"unknown init scheme {init!r}; expected 'uniform' or 'zeros'")

    def forward(self, x: Tensor) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects trailing dim {self.d_in}, got input shape {x.shape}")
        y = T.matmul(x, self.weight.T)
        if self.bias is not None:
            y = y + self.bias
        return y


class MLP(Module):
    """Stack of linear layers with an activation between them (none after the last)."""

    def __init__(self, widths: list[int], rng: np.random.Generator,
                 activation: Callable = T.silu, zero_last: bool = False):
        self.layers = [
            Linear(a, b, rng, init="zeros" if zero_last and i == len(widths) - 2 else "uniform")
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.activation(x)
        return x


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Embedding(Module):
    def __init__(self, vocab: int, d: int, rng: np.random.Generator, scale: float = 1.0):
        self.table = _param(rng.normal(0.0, scale, (vocab, d)))

    def forward(self, ids) -> Tensor:
        return embedding_lookup(self.table, ids)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table``; the gradient scatters back to the selected rows only."""
    ids_arr = np.asarray(ids)
    if not np.issubdtype(ids_arr.dtype, np.integer):
        raise TypeError(f"embedding ids must be integers, got {ids_arr.dtype}")
    vocab = table.shape[0]
    if ids_arr.size and (ids_arr.min() < 0 or ids_arr.max() >= vocab):
        raise IndexError(f"embedding id out of range [0, {vocab})")
    return T.getitem(table, ids_arr)


def sinusoidal_time_embedding(t, dim: int) -> np.ndarray:
    """Sin/cos features of ``t`` at geometric frequencies from 1 down to 1e-4.

    Returns ``[sin(w_0 t) .. sin(w_{k-1} t), cos(w_0 t) .. cos(w_{k-1} t)]`` with
    ``k = dim // 2``; a batch of times gives shape ``[batch, dim]``.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"time embedding dim must be a positive even number, got {dim}")
    half = dim // 2
    freqs = 10.0 ** (-4.0 * np.arange(half) / max(half - 1, 1))
    t = np.asarray(t, dtype=np.float64)
    args = t[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1).astype(T.get_dtype())


def _broadcast_cond(v: Tensor, ndim: int) -> Tensor:
    # [b, c] -> [b, 1, ..., 1, c] to align with features of rank ndim
    b, c = v.shape
    return v.reshape((b,) + (1,) * (ndim - 2) + (c,))


class FiLM(Module):
    """Feature-wise affine modulation: (1 + gamma) * features + beta.

    The map from condition to (gamma, beta) is zero-initialized, so the layer
    is the identity until trained.
    """

    def __init__(self, cond_dim: int, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.proj = Linear(cond_dim, 2 * channels, rng, init="zeros")

    def forward(self, features: Tensor, cond: Tensor) -> Tensor:
        if features.shape[-1] != self.channels:
            raise ShapeError(f"FiLM expects {self.channels} channels, got {features.shape}")
        gb = self.proj(cond)
        gamma = _broadcast_cond(gb[:, :self.channels], features.ndim)
        beta = _broadcast_cond(gb[:, self.channels:], features.ndim)
        return film_modulate(features, gamma, beta)


def film_modulate(features: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return features * (1.0 + gamma) + beta


class AdaLNFactors:
    """Per-sample (gamma, beta, alpha) triples for the two sublayers of a block."""

    __slots__ = ("gamma1", "beta1", "alpha1", "gamma2", "beta2", "alpha2")

    def __init__(self, gamma1, beta1, alpha1, gamma2, beta2, alpha2):
        self.gamma1, self.beta1, self.alpha1 = gamma1, beta1, alpha1
        self.gamma2, self.beta2, self.alpha2 = gamma2, beta2, alpha2

    def first(self):
        return self.gamma1, self.beta1, self.alpha1

    def second(self):
        return self.gamma2, self.beta2, self.alpha2


class AdaLNModulation(Module):
    """Condition -> six modulation factors via Linear, SiLU, zero-init Linear."""

    def __init__(self, cond_dim: int, d: int, rng: np.random.Generator):
        self.d = d
        self.hidden = Linear(cond_dim, cond_dim, rng)
        self.out = Linear(cond_dim, 6 * d, rng, init="zeros")

    def forward(self, cond: Tensor) -> AdaLNFactors:
        f = self.out(T.silu(self.hidden(cond)))
        b, d = f.shape[0], self.d
        f = f.reshape(b, 1, 6, d)
        return AdaLNFactors(*(f[:, :, i, :] for i in range(6)))


def adaln_modulate(x: Tensor, gamma: Tensor, beta: Tensor, alpha: Tensor,
                   sublayer: Callable[[Tensor], Tensor], eps: float = 1e-6) -> Tensor:
    """x + alpha * sublayer(LN(x) * (1 + gamma) + beta).

    Factors are shaped [batch, 1, d] and broadcast over the sequence.
    """
    for f in (gamma, beta, alpha):
        if not np.all(np.isfinite(f.data)):
            raise NumericDomainError("non-finite AdaLN modulation factor")
    h = T.layer_norm(x, axis=-1, eps=eps) * (1.0 + gamma) + beta
    return x + alpha * sublayer(h)
