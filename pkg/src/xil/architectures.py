"""Decoder-only and encoder-decoder policy networks built from X-Blocks."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .backbones import BACKBONES, XBlock, canonical_backbone
from .encoders import MODALITIES, PC_ENCODERS, ObservationBatch, ObservationEncoder
from .heads import HEADS, make_head
from .nn import Linear, Module, sinusoidal_time_embedding
from .tensor import Tensor, apply_op

ARCHITECTURES = ("decoder-only", "encoder-decoder")


class ConfigError(ValueError):
    """Invalid model or run configuration."""


def _check_choice(kind: str, value: str, options) -> None:
    if value not in options:
        raise ConfigError(f"unknown {kind} {value!r}; valid options: {{{', '.join(options)}}}")


# Block counts per backbone (decoder) and per (backbone, head) for encoders.
DECODER_LAYERS = {"transformer": 6, "mamba": 8, "xlstm": 8}


def default_encoder_layers(backbone: str, head: str) -> int:
    if backbone == "transformer":
        return 4
    return 8 if head == "beso" else 4


@dataclass
class ModelConfig:
    architecture: str = "decoder-only"
    backbone: str = "transformer"
    head: str = "beso"
    d_model: int = 512
    n_heads: int = 8
    n_layers: int | None = None
    n_enc_layers: int | None = None
    ff_ratio: float | None = None
    d_state: int = 16
    action_horizon: int = 8
    action_dim: int = 2
    state_dim: int = 2
    history: int = 1
    modalities: tuple = ("state",)
    n_goals: int = 4
    pc_encoder: str = "maxpool"
    n_points: int = 64
    pc_layers: int = 4
    pc_widths: tuple = (64, 128)
    image_size: int = 32
    patch_size: int = 8
    image_layers: int = 2

    def __post_init__(self):
        if self.backbone in ("attention", "ssm"):
            self.backbone = canonical_backbone(self.backbone)
        if self.head == "fm":
            self.head = "rf"
        self.modalities = tuple(self.modalities)
        self.pc_widths = tuple(self.pc_widths)
        _check_choice("architecture", self.architecture, ARCHITECTURES)
        _check_choice("backbone", self.backbone, BACKBONES)
        _check_choice("head", self.head, HEADS)
        _check_choice("pc_encoder", self.pc_encoder, PC_ENCODERS)
        for m in self.modalities:
            _check_choice("modality", m, MODALITIES)
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def decoder_layers(self) -> int:
        return self.n_layers if self.n_layers is not None else DECODER_LAYERS[self.backbone]

    @property
    def encoder_layers(self) -> int:
        if self.n_enc_layers is not None:
            return self.n_enc_layers
        return default_encoder_layers(self.backbone, self.head)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        d["pc_widths"] = list(self.pc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"unknown model config keys: {extra}")
        return cls(**d)


def sorted_mean_pool(x: Tensor) -> Tensor:
    """Mean over axis 1, summed in sorted order so any token permutation
    gives a bitwise-identical result."""
    x = T.as_tensor(x)
    L = x.shape[1]
    out = np.sort(x.data, axis=1).sum(axis=1) / L

    def backward(g):
        return (np.broadcast_to(g[:, None] / L, x.shape).copy(),)

    return apply_op("sorted_mean_pool", out, (x,), backward)


@dataclass
class Context:
    """Per-call observation encoding reused across denoising steps."""

    batch_size: int
    tokens: Tensor | None = None      # decoder-only: goal + observation tokens
    condition: Tensor | None = None   # encoder-decoder: pooled representation
    layout: list = field(default_factory=list)


class PolicyModel(Module):
    """Observation encoder + X-Block stack + action projections.

    The output projection is zero-initialized, so a fresh model predicts 0.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        c = config
        d = c.d_model
        self.action_shape = (c.action_horizon, c.action_dim)
        self.obs_encoder = ObservationEncoder(
            d, rng, modalities=c.modalities, state_dim=c.state_dim, n_goals=c.n_goals,
            pc_encoder=c.pc_encoder, n_points=c.n_points, image_size=c.image_size,
            patch_size=c.patch_size, n_heads=c.n_heads, image_layers=c.image_layers,
            pc_layers=c.pc_layers, pc_widths=c.pc_widths)
        n_obs = self.obs_encoder.n_tokens(c.history)
        self.action_in = Linear(c.action_dim, d, rng)
        block = dict(n_heads=c.n_heads, ff_ratio=c.ff_ratio, d_state=c.d_state)
        if c.architecture == "decoder-only":
            self.pos = Tensor(rng.normal(0.0, 0.02, (1, n_obs + c.action_horizon, d)),
                              requires_grad=True)
            self.decoder = [XBlock(c.backbone, d, d, rng, causal=True, **block)
                            for _ in range(c.decoder_layers)]
        else:
            self.enc_pos = Tensor(rng.normal(0.0, 0.02, (1, n_obs, d)), requires_grad=True)
            self.encoder = [XBlock(c.backbone, d, d, rng, causal=c.backbone != "transformer",
                                   **block) for _ in range(c.encoder_layers)]
            self.rep_proj = Linear(d, d, rng)
            self.pos = Tensor(rng.normal(0.0, 0.02, (1, c.action_horizon, d)), requires_grad=True)
            self.decoder = [XBlock(c.backbone, d, d, rng, causal=True, **block)
                            for _ in range(c.decoder_layers)]
        self.action_out = Linear(d, c.action_dim, rng, init="zeros")

    # -- encoding ---------------------------------------------------------
    def encode(self, obs: ObservationBatch) -> Context:
        if obs.history != self.config.history:
            raise ValueError(f"observation history {obs.history} != configured {self.config.history}")
        seq, fusion, goal_vec = self.obs_encoder(obs)
        if self.config.architecture == "decoder-only":
            return Context(obs.batch_size, tokens=seq.tokens, layout=seq.layout)
        x = seq.tokens + self.enc_pos
        for blk in self.encoder:
            x = blk(x, goal_vec)
        rep = self.rep_proj(self.pool(x)) + fusion
        return Context(obs.batch_size, condition=rep, layout=seq.layout)

    @staticmethod
    def pool(encoded: Tensor) -> Tensor:
        return sorted_mean_pool(encoded)

    # -- denoising --------------------------------------------------------
    def time_embedding(self, time_value, b: int) -> Tensor:
        t = np.broadcast_to(np.asarray(time_value, dtype=np.float64), (b,))
        return Tensor(sinusoidal_time_embedding(t, self.config.d_model))

    def denoise(self, ctx: Context, x, time_value) -> Tensor:
        """Predict from noisy actions [b, Ta, Da] at per-sample time values."""
        x = T.as_tensor(x)
        Ta, Da = self.action_shape
        if x.shape[1:] != (Ta, Da) or x.shape[0] != ctx.batch_size:
            raise T.ShapeError(f"expected actions [{ctx.batch_size}, {Ta}, {Da}], got {x.shape}")
        b = x.shape[0]
        cond = self.time_embedding(time_value, b)
        a_tok = self.action_in(x)
        if self.config.architecture == "decoder-only":
            h = T.concat([ctx.tokens, a_tok], axis=1) + self.pos
            for blk in self.decoder:
                h = blk(h, cond)
            h = h[:, -Ta:]
        else:
            cond = cond + ctx.condition
            h = a_tok + self.pos
            for blk in self.decoder:
                h = blk(h, cond)
        return self.action_out(T.layer_norm(h, eps=1e-6))

    def forward(self, obs: ObservationBatch, x, time_value) -> Tensor:
        return self.denoise(self.encode(obs), x, time_value)


def build_model(config, seed: int = 0) -> PolicyModel:
    """Construct a policy network from a ModelConfig or plain dict."""
    if isinstance(config, dict):
        config = ModelConfig.from_dict(config)
    return PolicyModel(config, np.random.default_rng(seed))


def make_policy(config, seed: int = 0):
    """Network plus its head, as a pair."""
    model = build_model(config, seed)
    return model, make_head(model.config.head)
