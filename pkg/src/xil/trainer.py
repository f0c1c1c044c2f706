"""Optimizers, training loop, closed-loop evaluation and latency benchmarks."""
from __future__ import annotations

import contextlib
import csv
import gc
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .architectures import ModelConfig, PolicyModel, build_model
from .heads import make_head
from .storage import PolicyCheckpoint, save_checkpoint
from .tasks import (ChunkDataset, EnvState, env_reset, env_step, make_observation)
from .tensor import Tape, Tensor


class NonFiniteGradientError(ArithmeticError):
    def __init__(self, name: str):
        self.param = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, step: int, checkpoint_path):
        self.step, self.checkpoint_path = step, checkpoint_path
        super().__init__(f"loss became non-finite at step {step}; last good checkpoint: {checkpoint_path}")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam; ``kind="adamw"`` adds decoupled weight decay.

    For AdamW the decay ``theta -= lr * wd * theta`` is applied before the
    Adam delta. Plain Adam ignores ``weight_decay``.
    """

    def __init__(self, named_params, kind: str = "adam", lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        if kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {kind!r}; valid options: {{adam, adamw}}")
        self.kind, self.lr, self.betas, self.eps = kind, lr, tuple(betas), eps
        self.weight_decay = weight_decay if kind == "adamw" else 0.0
        self.params = list(named_params)
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.step_count = 0

    def step(self, grads: dict) -> None:
        """Update from ``{param Tensor: grad}``; missing grads count as zero."""
        gs = []
        for name, p in self.params:
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(name)
            gs.append(g)
        self.step_count += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.step_count, 1 - b2 ** self.step_count
        for (name, p), g in zip(self.params, gs):
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step_count,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        for key in ("m", "v"):
            src = state[key]
            if set(src) != set(self.m):
                raise KeyError(f"optimizer {key} keys do not match the parameters")
            for k, arr in src.items():
                if arr.shape != self.m[k].shape:
                    raise T.ShapeError(f"optimizer {key}[{k}] shape {arr.shape} != {self.m[k].shape}")
            setattr(self, key, {k: np.array(a, dtype=self.m[k].dtype) for k, a in src.items()})
        self.step_count = int(state["step"])


def default_optimizer(head: str) -> str:
    return "adam" if head == "ddpm" else "adamw"


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 256
    lr: float = 1e-4
    optimizer: str = "auto"            # auto | adam | adamw
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    log_every: int = 100


@dataclass
class TrainReport:
    losses: list
    wall_time: float
    seed: int
    eval_metrics: dict = field(default_factory=dict)
    checkpoint_path: str | None = None

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


class MetricsLog:
    """Append-only ``metrics.csv`` (step, loss, wall_ms) and ``events.jsonl``."""

    def __init__(self, run_dir):
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._csv = open(self.dir / "metrics.csv", "a", newline="")
        self._writer = csv.writer(self._csv)
        if self._csv.tell() == 0:
            self._writer.writerow(["step", "loss", "wall_ms"])
        self._events = open(self.dir / "events.jsonl", "a")

    def metric(self, step: int, loss: float, wall_ms: float) -> None:
        self._writer.writerow([step, repr(float(loss)), f"{wall_ms:.3f}"])

    def event(self, kind: str, **payload) -> None:
        self._events.write(json.dumps({"event": kind, "time": time.time(), **payload}) + "\n")
        self._events.flush()

    def close(self) -> None:
        self._csv.close()
        self._events.close()


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless shuffled epochs of index batches (last partial batch dropped)."""
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i:i + batch_size]


def train(model_config: ModelConfig, dataset: ChunkDataset, seed: int = 0,
          train_config: TrainConfig | None = None, run_dir=None, model: PolicyModel | None = None,
          optimizer: Adam | None = None, dtype: str = "float32") -> tuple[TrainReport, PolicyCheckpoint]:
    """Fit ``model_config`` on ``dataset``.

    The batch size shrinks to the dataset size for tiny datasets. If the loss
    becomes non-finite, the last good state is written (when ``run_dir`` is
    given) and ``TrainingDiverged`` is raised.
    """
    tc = train_config or TrainConfig()
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    with T.precision(dtype):
        model = model or build_model(model_config, seed)
        head = make_head(model.config.head)
        kind = default_optimizer(model.config.head) if tc.optimizer == "auto" else tc.optimizer
        opt = optimizer or Adam(model.named_parameters(), kind=kind, lr=tc.lr, betas=tc.betas,
                                eps=tc.eps, weight_decay=tc.weight_decay)
        rng = np.random.default_rng([seed, 1])
        batch_size = min(tc.batch_size, n)
        log = MetricsLog(run_dir) if run_dir is not None else None
        ckpt_path = Path(run_dir) / "checkpoint.xil" if run_dir is not None else None
        actions = dataset.actions
        losses = []
        t0 = time.perf_counter()
        if log:
            log.event("train_start", seed=seed, steps=tc.steps, batch_size=batch_size, optimizer=kind)
        good_state = None
        batches = _batches(n, batch_size, rng)
        for step in range(1, tc.steps + 1):
            idx = next(batches)
            with Tape() as tape:
                loss = head.loss(model, dataset.observations(idx), actions[idx], rng)
                value = loss.item()
                if not math.isfinite(value):
                    if log:
                        # roll back to the newest parameters whose loss was finite
                        if good_state is not None:
                            model.load_state_dict(good_state)
                        save_checkpoint(model, opt, ckpt_path,
                                        {"step": max(step - 2, 0), "diverged": True})
                        log.event("diverged", step=step)
                        log.close()
                    raise TrainingDiverged(step, ckpt_path)
                grads = tape.backward(loss)
            if log:
                good_state = model.state_dict()
            opt.step(grads)
            losses.append(value)
            if log:
                log.metric(step, value, (time.perf_counter() - t0) * 1e3)
                if step % tc.log_every == 0 or step == tc.steps:
                    log.event("progress", step=step, loss=value)
        wall = time.perf_counter() - t0
        ckpt = PolicyCheckpoint(model.config, model.state_dict(), opt.state_dict(),
                                {"step": tc.steps, "seed": seed})
        if log:
            save_checkpoint(model, opt, ckpt_path, {"step": tc.steps, "seed": seed})
            log.event("train_end", final_loss=losses[-1] if losses else None, wall_time=wall)
            log.close()
    report = TrainReport(losses, wall, seed, checkpoint_path=str(ckpt_path) if ckpt_path else None)
    report.model = model
    return report, ckpt


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

class ModelPolicy:
    """Wraps a trained model + head as ``obs -> action chunk`` (no tape)."""

    def __init__(self, model: PolicyModel, steps: int = 4, seed: int = 0):
        self.model = model
        self.head = make_head(model.config.head)
        self.steps = steps
        self.rng = np.random.default_rng(seed)

    def __call__(self, obs) -> np.ndarray:
        return self.head.sample(self.model, obs, steps=self.steps, rng=self.rng)


class ZeroPolicy:
    def __init__(self, horizon: int = 8):
        self.horizon = horizon

    def __call__(self, obs) -> np.ndarray:
        return np.zeros((obs.batch_size, self.horizon, 2))


def evaluate_rollouts(policy, n_episodes: int = 100, history: int = 1,
                      modalities=("state",)) -> float:
    """Fraction of successful closed-loop episodes on the bimodal reach task.

    All episodes advance in lockstep as one batch; each step executes only the
    first action of the predicted chunk (receding horizon).
    """
    if isinstance(policy, PolicyCheckpoint):
        policy = ModelPolicy(policy.build())
    if isinstance(policy, ModelPolicy):
        history, modalities = policy.model.config.history, policy.model.config.modalities
    states = [env_reset() for _ in range(n_episodes)]
    hist = [[s.pos] * history for s in states]
    done = np.zeros(n_episodes, bool)
    success = np.zeros(n_episodes, bool)
    while not done.all():
        live = np.flatnonzero(~done)
        obs = make_observation(np.array([hist[i] for i in live]), modalities)
        chunk = np.asarray(policy(obs))
        for j, i in enumerate(live):
            states[i], d, s = env_step(states[i], chunk[j, 0])
            hist[i] = hist[i][1:] + [states[i].pos]
            done[i], success[i] = d, s
    return float(success.mean())


# ---------------------------------------------------------------------------
# benchmarks
# ---------------------------------------------------------------------------

BENCH_HEADS = ("ddpm", "beso", "rf")
BENCH_STEPS = (1, 4, 8, 12, 16)
MIN_TOTAL_SECONDS = 0.02


@dataclass
class BenchRow:
    head: str
    steps: int
    mean_ms: float
    std_ms: float
    repeats: int
    median_ms: float = 0.0


def _time_calls(fn, repeats: int, warmup: int) -> np.ndarray:
    """Per-call wall times in ms; warmup calls are run and discarded."""
    for _ in range(warmup):
        fn()
    out = np.empty(repeats)
    with _gc_paused():
        for r in range(repeats):
            t0 = time.perf_counter()
            fn()
            out[r] = (time.perf_counter() - t0) * 1e3
    return out


@contextlib.contextmanager
def _gc_paused():
    # collector pauses land on random calls; keep them out of the samples
    was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


def bench_inference_steps(model: PolicyModel, obs, heads=BENCH_HEADS, steps=BENCH_STEPS,
                          repeats: int = 10, warmup: int = 2, seed: int = 0) -> list[BenchRow]:
    """Latency of one full sampling call per (head, step count).

    When a measurement is too short for the timer to resolve reliably, the
    repeat count is raised until the total measured time covers it.
    """
    res = time.get_clock_info("perf_counter").resolution
    cells = []
    for name in heads:
        head = make_head(name)
        rng = np.random.default_rng(seed)
        for k in steps:
            cells.append((name, k, lambda head=head, k=k, rng=rng:
                          head.sample(model, obs, steps=k, rng=rng)))
    for _, _, call in cells:
        for _ in range(warmup):
            call()
    # round-robin so slow stretches of machine time spread over every cell
    samples = [[] for _ in cells]
    with _gc_paused():
        for _ in range(repeats):
            for i, (_, _, call) in enumerate(cells):
                t0 = time.perf_counter()
                call()
                samples[i].append((time.perf_counter() - t0) * 1e3)
    rows = []
    for (name, k, call), ts in zip(cells, samples):
        times, reps = np.asarray(ts), repeats
        while times.sum() * 1e-3 < max(MIN_TOTAL_SECONDS, 1000 * res) and reps < 10_000:
            reps *= 4
            times = _time_calls(call, reps, 0)
        rows.append(BenchRow(name, k, float(times.mean()), float(times.std()), reps,
                             float(np.median(times))))
    return rows


def affine_fit(x, y) -> tuple[float, float, float]:
    """Least-squares y = a + b x; returns (a, b, R^2)."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    b, a = np.polyfit(x, y, 1)
    resid = y - (a + b * x)
    ss_tot = ((y - y.mean()) ** 2).sum()
    return float(a), float(b), float(1.0 - (resid ** 2).sum() / ss_tot) if ss_tot > 0 else 1.0


@dataclass
class BenchSummary:
    fits: dict                 # head -> (a, b, r2)
    ratios: dict               # head -> time(max steps) / time(min steps)
    max_cross_head_spread: float

    def failures(self, r2_min=0.99, spread_max=0.15, ratio_range=(8.0, 16.0)) -> list[str]:
        out = [f"{h}: R^2 {r2:.4f} < {r2_min}" for h, (_, _, r2) in self.fits.items() if r2 < r2_min]
        if self.max_cross_head_spread > spread_max:
            out.append(f"cross-head spread {self.max_cross_head_spread:.3f} > {spread_max}")
        out += [f"{h}: ratio {r:.2f} outside {ratio_range}" for h, r in self.ratios.items()
                if not ratio_range[0] <= r <= ratio_range[1]]
        return out


def summarize_bench(rows: list[BenchRow]) -> BenchSummary:
    """Per-head affine fits and step ratios on medians, and the largest
    relative (max - min) / min spread across heads at any step count."""
    by_head: dict = {}
    for r in rows:
        by_head.setdefault(r.head, []).append(r)
    fits, ratios = {}, {}
    for h, rs in by_head.items():
        rs = sorted(rs, key=lambda r: r.steps)
        fits[h] = affine_fit([r.steps for r in rs], [r.median_ms for r in rs])
        ratios[h] = rs[-1].median_ms / rs[0].median_ms
    spread = 0.0
    for k in sorted({r.steps for r in rows}):
        ts = [r.median_ms for r in rows if r.steps == k]
        spread = max(spread, (max(ts) - min(ts)) / min(ts))
    return BenchSummary(fits, ratios, spread)


def write_bench_csv(rows: list[BenchRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["head", "steps", "mean_ms", "std_ms", "repeats"])
        for r in rows:
            w.writerow([r.head, r.steps, f"{r.mean_ms:.6f}", f"{r.std_ms:.6f}", r.repeats])


def read_bench_csv(path) -> list[BenchRow]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        need = {"head", "steps", "mean_ms", "std_ms", "repeats"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns {sorted(need)}, got {reader.fieldnames}")
        return [BenchRow(r["head"], int(r["steps"]), float(r["mean_ms"]), float(r["std_ms"]),
                         int(r["repeats"]), float(r["mean_ms"])) for r in reader]


def plot_bench(rows: list[BenchRow], path) -> None:
    """Line plot of mean latency vs steps, one series per head, saved as SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for h in dict.fromkeys(r.head for r in rows):
        rs = sorted((r for r in rows if r.head == h), key=lambda r: r.steps)
        ax.errorbar([r.steps for r in rs], [r.mean_ms for r in rs],
                    yerr=[r.std_ms for r in rs], marker="o", capsize=3, label=h.upper())
    ax.set_xlabel("sampling steps")
    ax.set_ylabel("time per call (ms)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def time_backbone_layer(backbone: str, lengths, d: int = 64, runs: int = 20, seed: int = 0) -> dict:
    """Median forward time (ms) of one sequence layer per length, batch 1."""
    from .backbones import make_layer

    rng = np.random.default_rng(seed)
    layer = make_layer(backbone, d, rng)
    out = {}
    for L in lengths:
        x = Tensor(rng.standard_normal((1, L, d)).astype(T.get_dtype()))
        times = _time_calls(lambda: layer(x), runs, warmup=2)
        out[L] = float(np.median(times))
    return out


def loglog_slope(lengths, times) -> float:
    return float(np.polyfit(np.log(list(lengths)), np.log(list(times)), 1)[0])
