"""scikit-learn style wrapper: ``XILPolicy().fit(states, chunks).predict(states)``."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import tensor as T
from .architectures import ModelConfig
from .encoders import ObservationBatch
from .heads import make_head
from .trainer import TrainConfig, train


def validate_states(X, history: int | None = None) -> np.ndarray:
    """Coerce states to a finite float array [n, h, ds]; 2-D input gets h = 1."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim == 2:
        X = X[:, None, :]
    if X.ndim != 3:
        raise ValueError(f"states must be [n, ds] or [n, h, ds], got shape {X.shape}")
    if history is not None and X.shape[1] != history:
        raise ValueError(f"expected history {history}, got {X.shape[1]}")
    return X


def validate_chunks(y, n: int) -> np.ndarray:
    """Coerce action targets to [n, Ta, Da] in [-1, 1]; 2-D input gets Ta = 1."""
    y = check_array(y, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if y.ndim == 2:
        y = y[:, None, :]
    if y.ndim != 3 or y.shape[0] != n:
        raise ValueError(f"actions must be [{n}, Ta, Da] or [{n}, Da], got shape {y.shape}")
    if np.abs(y).max() > 1.0:
        raise ValueError("actions must lie in [-1, 1]")
    return y


def validate_goals(goals, n: int, n_goals: int) -> np.ndarray:
    if goals is None:
        return np.zeros(n, dtype=np.int64)
    g = np.asarray(goals)
    if g.shape != (n,) or not np.issubdtype(g.dtype, np.integer):
        raise ValueError(f"goal ids must be {n} integers, got {g.dtype} array of shape {g.shape}")
    if g.min() < 0 or g.max() >= n_goals:
        raise ValueError(f"goal ids must lie in [0, {n_goals})")
    return g


class _ArrayDataset:
    def __init__(self, states, actions, goals):
        self.states, self.actions, self.goals = states, actions, goals

    def __len__(self):
        return len(self.actions)

    def observations(self, idx=slice(None)):
        return ObservationBatch(self.goals[idx], state=self.states[idx])


class XILPolicy(BaseEstimator):
    """State-conditioned action-chunk policy with a configurable backbone and head.

    ``fit(X, y)`` takes states [n, ds] or [n, h, ds] and action chunks
    [n, Ta, Da] (or [n, Da]); ``predict(X)`` samples chunks.
    """

    def __init__(self, architecture="decoder-only", backbone="transformer", head="beso",
                 d_model=64, n_heads=4, n_layers=2, n_goals=4, steps=1000, batch_size=256,
                 lr=1e-3, sampling_steps=4, random_state=0):
        self.architecture = architecture
        self.backbone = backbone
        self.head = head
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.n_goals = n_goals
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.sampling_steps = sampling_steps
        self.random_state = random_state

    def fit(self, X, y, goals=None):
        X = validate_states(X)
        y = validate_chunks(y, len(X))
        g = validate_goals(goals, len(X), self.n_goals)
        config = ModelConfig(architecture=self.architecture, backbone=self.backbone,
                             head=self.head, d_model=self.d_model, n_heads=self.n_heads,
                             n_layers=self.n_layers, n_enc_layers=self.n_layers,
                             action_horizon=y.shape[1], action_dim=y.shape[2],
                             state_dim=X.shape[2], history=X.shape[1], n_goals=self.n_goals)
        report, _ = train(config, _ArrayDataset(X, y, g), self.random_state,
                          TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr))
        self.model_ = report.model
        self.loss_curve_ = list(report.losses)
        self.n_features_in_ = X.shape[2]
        return self

    def predict(self, X, goals=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        c = self.model_.config
        X = validate_states(X, c.history)
        if X.shape[2] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} state features, got {X.shape[2]}")
        g = validate_goals(goals, len(X), self.n_goals)
        rng = np.random.default_rng(self.random_state)
        with T.precision(self.model_.action_out.weight.dtype):
            return make_head(c.head).sample(self.model_, ObservationBatch(g, state=X),
                                            steps=self.sampling_steps, rng=rng)
