"""Procedural toy tasks: a bimodal 2-D reach and a point-cloud centroid scene."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import ObservationBatch

START = np.array([0.0, 0.0])
GOAL = np.array([1.0, 0.0])
WAYPOINTS = np.array([[0.5, 0.4], [0.5, -0.4]])
DT = 0.05
EPISODE_LENGTH = 40
SUCCESS_RADIUS = 0.05
IMAGE_SIZE = 32
# top-down view extent: x in [-0.2, 1.2], y in [-0.7, 0.7]
_VIEW_MIN = np.array([-0.2, -0.7])
_VIEW_SPAN = 1.4


@dataclass
class EnvState:
    pos: np.ndarray
    t: int = 0


def env_reset() -> EnvState:
    return EnvState(START.copy(), 0)


def env_step(state: EnvState, action) -> tuple[EnvState, bool, bool]:
    """Move by clip(action, -1, 1) * DT. Returns (state', done, success)."""
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (2,) or not np.all(np.isfinite(a)):
        raise ValueError(f"action must be a finite 2-vector, got {action!r}")
    pos = state.pos + np.clip(a, -1.0, 1.0) * DT
    t = state.t + 1
    success = bool(np.linalg.norm(pos - GOAL) < SUCCESS_RADIUS)
    return EnvState(pos, t), success or t >= EPISODE_LENGTH, success


def _toward(pos: np.ndarray, target: np.ndarray) -> np.ndarray:
    delta = target - pos
    dist = np.linalg.norm(delta)
    if dist < 1e-12:
        return np.zeros(2)
    speed = min(1.0, dist / DT)
    return delta / dist * speed


def expert_rollout(branch: int) -> tuple[np.ndarray, np.ndarray]:
    """Scripted demo through waypoint ``branch`` (0: +y, 1: -y).

    Returns positions [T+1, 2] and actions [T, 2].
    """
    state = env_reset()
    waypoint = WAYPOINTS[branch]
    reached = False
    positions, actions = [state.pos], []
    done = False
    while not done:
        if not reached and np.linalg.norm(state.pos - waypoint) < 1e-9:
            reached = True
        a = _toward(state.pos, GOAL if reached else waypoint)
        state, done, _ = env_step(state, a)
        positions.append(state.pos)
        actions.append(a)
    return np.array(positions), np.array(actions)


class ExpertPolicy:
    """Scripted expert acting from positions only; picks a branch at the start."""

    def __init__(self, rng: np.random.Generator, horizon: int = 8):
        self.rng = rng
        self.horizon = horizon

    def __call__(self, obs: ObservationBatch) -> np.ndarray:
        pos = obs.state[:, -1]
        out = np.zeros((len(pos), self.horizon, 2))
        for i, p in enumerate(pos):
            if p[0] < WAYPOINTS[0, 0] - 1e-9:
                side = self.rng.integers(2) if abs(p[1]) < 1e-12 else int(p[1] < 0)
                a = _toward(p, WAYPOINTS[side])
            else:
                a = _toward(p, GOAL)
            out[i, 0] = a
        return out


def render_image(pos) -> np.ndarray:
    """32x32 RGB top-down view: goal as a green square, agent as a red square."""
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3))

    def pixel(p):
        ij = np.floor((np.asarray(p) - _VIEW_MIN) / _VIEW_SPAN * IMAGE_SIZE).astype(int)
        return np.clip(ij, 1, IMAGE_SIZE - 2)

    gx, gy = pixel(GOAL)
    img[gy - 1:gy + 2, gx - 1:gx + 2, 1] = 1.0
    ax, ay = pixel(pos)
    img[ay - 1:ay + 2, ax - 1:ax + 2, 0] = 1.0
    return img


def make_observation(positions: np.ndarray, modalities=("state",), goal_id=None) -> ObservationBatch:
    """Observation batch from position histories [b, h, 2]."""
    positions = np.asarray(positions, dtype=np.float64)
    b, h, _ = positions.shape
    image = None
    if "image" in modalities:
        image = np.stack([[render_image(p) for p in hist] for hist in positions])
    if "cloud" in modalities:
        raise ValueError("the reach task has no point-cloud observations")
    goal = np.zeros(b, dtype=np.int64) if goal_id is None else goal_id
    return ObservationBatch(goal, state=positions if "state" in modalities else None, image=image)


@dataclass
class ChunkDataset:
    """(observation, action chunk) pairs; arrays keyed by name, plus metadata."""

    arrays: dict
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.arrays["actions"])

    @property
    def actions(self) -> np.ndarray:
        return self.arrays["actions"]

    def observations(self, idx=slice(None)) -> ObservationBatch:
        a = self.arrays
        goal = a["goal_id"][idx].astype(np.int64)

        def get(key):
            return a[key][idx] if key in a else None

        return ObservationBatch(goal, state=get("state"), image=get("image"), cloud=get("cloud"))


def gen_bimodal_reach_dataset(n_episodes: int, seed: int, history: int = 1,
                              action_horizon: int = 8, images: bool = False) -> ChunkDataset:
    """Expert demos with a fair coin choosing the waypoint, cut into action chunks.

    Every timestep yields one sample (stride 1); chunks running past the end
    of an episode are padded with zero actions. Each episode draws its branch
    from its own seed derived from ``seed``.
    """
    if n_episodes < 2:
        raise ValueError("need at least 2 episodes")
    children = np.random.SeedSequence(seed).spawn(n_episodes)
    branches = [int(np.random.default_rng(c).integers(0, 2)) for c in children]
    states, chunks, episode, branch_of = [], [], [], []
    rollouts = {b: expert_rollout(b) for b in (0, 1)}
    for ep, br in enumerate(branches):
        pos, act = rollouts[int(br)]
        T_ep = len(act)
        padded = np.concatenate([act, np.zeros((action_horizon, 2))])
        for t in range(T_ep):
            hist = [pos[max(0, t - k)] for k in range(history - 1, -1, -1)]
            states.append(hist)
            chunks.append(padded[t:t + action_horizon])
            episode.append(ep)
            branch_of.append(br)
    arrays = {
        "state": np.array(states, dtype=np.float32),
        "actions": np.array(chunks, dtype=np.float32),
        "goal_id": np.zeros(len(states), dtype=np.float32),
        "episode": np.array(episode, dtype=np.float32),
        "branch": np.array(branch_of, dtype=np.float32),
    }
    if images:
        arrays["image"] = np.array([[render_image(p) for p in h] for h in states], dtype=np.float32)
    meta = {"task": "bimodal_reach", "n_episodes": n_episodes, "seed": seed,
            "history": history, "action_horizon": action_horizon, "dt": DT,
            "episode_length": EPISODE_LENGTH}
    return ChunkDataset(arrays, meta)


def mode_actions() -> np.ndarray:
    """The expert's first action toward each waypoint, shape [2, 2]."""
    return np.array([_toward(START, w) for w in WAYPOINTS])


# ---------------------------------------------------------------------------
# point-cloud scene
# ---------------------------------------------------------------------------

# (length, width, height) of the three object shapes
SHAPES = np.array([[0.2, 0.2, 0.2], [0.3, 0.3, 0.1], [0.12, 0.12, 0.3]])
N_CLOUD_POINTS = 512
FLOOR_HALF = 0.8


def _box_surface(rng, dims, n) -> np.ndarray:
    """Uniform samples on the four sides and top of an axis-aligned box at the origin."""
    l, w, h = dims
    areas = np.array([w * h, w * h, l * h, l * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u, v = rng.uniform(size=(2, n))
    pts = np.column_stack([(u - 0.5) * l, (v - 0.5) * w, np.full(n, h)])  # top face
    xs = face < 2
    pts[xs, 0] = np.where(face[xs] == 0, -l / 2, l / 2)
    pts[xs, 1] = (u[xs] - 0.5) * w
    pts[xs, 2] = v[xs] * h
    ys = (face == 2) | (face == 3)
    pts[ys, 1] = np.where(face[ys] == 2, -w / 2, w / 2)
    pts[ys, 2] = v[ys] * h
    return pts


def gen_point_cloud_scene(n_samples: int, seed: int, n_points: int = N_CLOUD_POINTS,
                          object_fraction: float = 0.5) -> ChunkDataset:
    """Clouds of one box-shaped object on a floor; label is the object's centroid.

    ``goal_id`` names which of the three shapes is present.
    """
    rng = np.random.default_rng(seed)
    n_obj = int(round(n_points * object_fraction))
    clouds = np.empty((n_samples, 1, n_points, 3))
    labels = np.empty((n_samples, 3))
    shapes = rng.integers(0, len(SHAPES), size=n_samples)
    for i, s in enumerate(shapes):
        dims = SHAPES[s]
        center = rng.uniform(-0.4, 0.4, size=2)
        yaw = rng.uniform(0, np.pi)
        c, sn = np.cos(yaw), np.sin(yaw)
        obj = _box_surface(rng, dims, n_obj)
        obj[:, :2] = obj[:, :2] @ np.array([[c, sn], [-sn, c]]) + center
        floor = np.column_stack([rng.uniform(-FLOOR_HALF, FLOOR_HALF, (n_points - n_obj, 2)),
                                 np.zeros(n_points - n_obj)])
        pts = np.concatenate([obj, floor])
        clouds[i, 0] = pts[rng.permutation(n_points)]
        labels[i] = [center[0], center[1], dims[2] / 2]
    arrays = {"cloud": clouds.astype(np.float32), "centroid": labels.astype(np.float32),
              "goal_id": shapes.astype(np.float32)}
    return ChunkDataset({**arrays, "actions": labels.astype(np.float32)[:, None, :]},
                        {"task": "point_cloud_scene", "n_samples": n_samples, "seed": seed})
