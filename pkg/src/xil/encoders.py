"""Observation tokenization: state, image, point cloud, goal.

Each modality contributes one token per history step, plus a single goal
token in front. Point clouds are downsampled with farthest point sampling
before encoding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbones import TransformerBlock
from .nn import MLP, Embedding, FiLM, Linear, Module
from .tensor import ShapeError, Tensor

MODALITIES = ("state", "image", "cloud")
PC_ENCODERS = ("maxpool", "attention")


def farthest_point_sampling(points, k: int, start_index: int = 0) -> np.ndarray:
    """Greedy max-min subset of ``k`` point indices, starting at ``start_index``.

    Ties go to the lowest index. Deterministic.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"expected points of shape [n, 3], got {pts.shape}")
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"cannot sample k={k} points from a cloud of {n}")
    if not 0 <= start_index < n:
        raise IndexError(f"start_index {start_index} out of range for {n} points")
    idx = np.empty(k, dtype=np.int64)
    idx[0] = start_index
    dist = np.sqrt(((pts - pts[start_index]) ** 2).sum(-1))
    dist[start_index] = -1.0
    for j in range(1, k):
        i = int(np.argmax(dist))
        idx[j] = i
        dist = np.minimum(dist, np.sqrt(((pts - pts[i]) ** 2).sum(-1)))
        dist[idx[:j + 1]] = -1.0
    return idx


class MaxPoolPointEncoder(Module):
    """Shared per-point MLP followed by a channelwise max over points."""

    def __init__(self, d_out: int, rng: np.random.Generator, widths=(64, 128)):
        self.mlp = MLP([3, *widths, d_out], rng, activation=T.silu)

    def forward(self, points: Tensor) -> Tensor:
        return self.mlp(points).max(axis=1)


class AttentionPointEncoder(Module):
    """Point tokens plus a learned CLS token through non-causal attention blocks.

    Points are put in lexicographic order first, which makes the output
    exactly (bitwise) independent of the input order.
    """

    def __init__(self, d: int, rng: np.random.Generator, n_layers: int = 4, n_heads: int = 8):
        self.lift = Linear(3, d, rng)
        self.cls = Tensor(rng.normal(0.0, 0.02, (1, 1, d)), requires_grad=True)
        self.blocks = [TransformerBlock(d, n_heads, rng) for _ in range(n_layers)]

    def forward(self, points: Tensor) -> Tensor:
        pts = T.as_tensor(points)
        b, k, _ = pts.shape
        p = pts.data
        order = np.stack([np.lexsort((p[i, :, 2], p[i, :, 1], p[i, :, 0])) for i in range(b)])
        pts = pts[np.arange(b)[:, None], order]
        tokens = self.lift(pts)
        cls = self.cls + np.zeros((b, 1, tokens.shape[-1]), dtype=tokens.dtype)
        x = T.concat([cls, tokens], axis=1)
        for blk in self.blocks:
            x = blk(x)
        return T.layer_norm(x[:, 0], eps=1e-6)


class PatchImageEncoder(Module):
    """Square image -> one token: patch embedding, FiLM-conditioned attention, mean pool."""

    def __init__(self, d: int, cond_dim: int, rng: np.random.Generator, image_size: int = 32,
                 patch_size: int = 8, n_layers: int = 2, n_heads: int = 8):
        if image_size % patch_size:
            raise ValueError(f"image size {image_size} not divisible by patch size {patch_size}")
        self.image_size, self.patch_size = image_size, patch_size
        n_patches = (image_size // patch_size) ** 2
        self.embed = Linear(patch_size * patch_size * 3, d, rng)
        self.pos = Tensor(rng.normal(0.0, 0.02, (1, n_patches, d)), requires_grad=True)
        self.films = [FiLM(cond_dim, d, rng) for _ in range(n_layers)]
        self.blocks = [TransformerBlock(d, n_heads, rng) for _ in range(n_layers)]

    def patchify(self, img: Tensor) -> Tensor:
        img = T.as_tensor(img)
        b, H, W, c = img.shape
        p = self.patch_size
        if H % p or W % p or c != 3:
            raise ShapeError(f"image shape {img.shape} incompatible with {p}x{p} RGB patches")
        x = img.reshape(b, H // p, p, W // p, p, c).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, (H // p) * (W // p), p * p * c)

    def embed_patches(self, img: Tensor) -> Tensor:
        return self.embed(self.patchify(img))

    def forward(self, img: Tensor, cond: Tensor | None = None) -> Tensor:
        x = self.embed_patches(img) + self.pos
        for film, blk in zip(self.films, self.blocks):
            if cond is not None:
                x = film(x, cond)
            x = blk(x)
        return x.mean(axis=1)


@dataclass
class ObservationBatch:
    """Observations with batch and history axes.

    state: [b, h, ds]; image: [b, h, H, W, 3] in [0, 1]; cloud: [b, h, n, 3];
    goal_id: [b] integers.
    """

    goal_id: np.ndarray
    state: np.ndarray | None = None
    image: np.ndarray | None = None
    cloud: np.ndarray | None = None

    def __post_init__(self):
        self.goal_id = np.asarray(self.goal_id, dtype=np.int64).reshape(-1)
        present = [m for m in MODALITIES if getattr(self, m) is not None]
        if not present:
            raise ValueError("ObservationBatch needs at least one of state, image, cloud")
        b = len(self.goal_id)
        h = None
        for m in present:
            arr = np.asarray(getattr(self, m))
            want = {"state": 3, "image": 5, "cloud": 4}[m]
            if arr.ndim != want:
                raise ShapeError(f"{m} must be {want}-d [batch, history, ...], got shape {arr.shape}")
            if arr.shape[0] != b:
                raise ShapeError(f"{m} batch {arr.shape[0]} != goal_id batch {b}")
            if h is None:
                h = arr.shape[1]
            elif arr.shape[1] != h:
                raise ShapeError(f"{m} history {arr.shape[1]} differs from {h}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{m} contains non-finite values")
            setattr(self, m, arr)

    @property
    def batch_size(self) -> int:
        return len(self.goal_id)

    @property
    def history(self) -> int:
        for m in MODALITIES:
            arr = getattr(self, m)
            if arr is not None:
                return arr.shape[1]
        raise AssertionError("unreachable")

    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if getattr(self, m) is not None)

    def take(self, idx) -> "ObservationBatch":
        def sel(a):
            return None if a is None else a[idx]
        return ObservationBatch(self.goal_id[idx], sel(self.state), sel(self.image), sel(self.cloud))


@dataclass
class TokenSequence:
    tokens: Tensor
    layout: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.tokens.shape[1] != len(self.layout):
            raise ShapeError(f"{self.tokens.shape[1]} tokens but layout has {len(self.layout)} tags")


class ObservationEncoder(Module):
    """Turns an ObservationBatch into goal + per-modality tokens and a fusion vector."""

    def __init__(self, d: int, rng: np.random.Generator, modalities=("state",), state_dim: int = 2,
                 n_goals: int = 4, pc_encoder: str = "maxpool", n_points: int = 64,
                 image_size: int = 32, patch_size: int = 8, n_heads: int = 8,
                 image_layers: int = 2, pc_layers: int = 4, pc_widths=(64, 128),
                 fps_start: int = 0):
        unknown = [m for m in modalities if m not in MODALITIES]
        if unknown or not modalities:
            raise ValueError(f"modalities must be a non-empty subset of {MODALITIES}, got {modalities}")
        if pc_encoder not in PC_ENCODERS:
            raise ValueError(f"unknown point-cloud encoder {pc_encoder!r}; valid options: {PC_ENCODERS}")
        self.modalities = tuple(m for m in MODALITIES if m in modalities)
        self.d, self.n_points, self.fps_start = d, n_points, fps_start
        self.goal = Embedding(n_goals, d, rng)
        if "state" in self.modalities:
            self.state_lift = Linear(state_dim, d, rng)
        if "image" in self.modalities:
            self.image_enc = PatchImageEncoder(d, d, rng, image_size=image_size,
                                               patch_size=patch_size, n_layers=image_layers,
                                               n_heads=n_heads)
        if "cloud" in self.modalities:
            if pc_encoder == "maxpool":
                self.cloud_enc = MaxPoolPointEncoder(d, rng, widths=pc_widths)
            else:
                self.cloud_enc = AttentionPointEncoder(d, rng, n_layers=pc_layers, n_heads=n_heads)
        self.fusion = Linear(len(self.modalities) * d, d, rng)

    def n_tokens(self, history: int) -> int:
        return history * len(self.modalities) + 1

    def sample_cloud(self, cloud: np.ndarray) -> np.ndarray:
        """FPS-downsample [..., n, 3] clouds to [..., k, 3]."""
        flat = cloud.reshape(-1, *cloud.shape[-2:])
        k = min(self.n_points, flat.shape[1])
        out = np.stack([c[farthest_point_sampling(c, k, self.fps_start)] for c in flat])
        return out.reshape(*cloud.shape[:-2], k, 3)

    def modality_features(self, obs: ObservationBatch, goal_vec: Tensor) -> dict[str, Tensor]:
        """Per-modality features shaped [b, h, d]."""
        b, h = obs.batch_size, obs.history
        feats = {}
        for m in self.modalities:
            if getattr(obs, m) is None:
                raise ValueError(f"modality {m!r} is configured but missing from the batch")
        if "state" in self.modalities:
            feats["state"] = self.state_lift(Tensor(obs.state))
        if "image" in self.modalities:
            img = Tensor(obs.image.reshape(b * h, *obs.image.shape[2:]))
            cond = goal_vec.reshape(b, 1, self.d) + np.zeros((1, h, 1))
            f = self.image_enc(img, cond.reshape(b * h, self.d))
            feats["image"] = f.reshape(b, h, self.d)
        if "cloud" in self.modalities:
            pts = self.sample_cloud(obs.cloud)
            f = self.cloud_enc(Tensor(pts.reshape(b * h, *pts.shape[2:])))
            feats["cloud"] = f.reshape(b, h, self.d)
        return feats

    def fuse(self, feats: dict[str, Tensor]) -> Tensor:
        """Concatenate latest-step modality features and project to d.

        A configured modality absent from ``feats`` contributes a zero block.
        """
        if not feats:
            raise ValueError("fuse() needs at least one modality feature")
        b = next(iter(feats.values())).shape[0]
        parts = []
        for m in self.modalities:
            f = feats.get(m)
            if f is None:
                parts.append(Tensor(np.zeros((b, self.d))))
            else:
                parts.append(f[:, -1] if f.ndim == 3 else f)
        return self.fusion(T.concat(parts, axis=-1))

    def forward(self, obs: ObservationBatch) -> tuple[TokenSequence, Tensor, Tensor]:
        """Returns (token sequence, fusion vector [b, d], goal vector [b, d])."""
        b, h = obs.batch_size, obs.history
        goal_vec = self.goal(obs.goal_id)
        feats = self.modality_features(obs, goal_vec)
        per_step = T.stack([feats[m] for m in self.modalities], axis=2)  # [b, h, M, d]
        obs_tokens = per_step.reshape(b, h * len(self.modalities), self.d)
        tokens = T.concat([goal_vec.reshape(b, 1, self.d), obs_tokens], axis=1)
        layout = ["goal"] + [f"{m}@{t}" for t in range(h) for m in self.modalities]
        return TokenSequence(tokens, layout), self.fuse(feats), goal_vec
