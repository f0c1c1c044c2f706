"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that the terminal summary prints at the end
of the run. The training-based criteria share trained models through a
module-level cache so no configuration is fitted twice.
"""
import itertools
import time

import numpy as np
import pytest

from xil import tensor as T
from xil.architectures import ARCHITECTURES, ModelConfig, build_model, make_policy
from xil.backbones import BACKBONES, SelfAttention, XBlock, selective_scan, xlstm_scan
from xil.encoders import (AttentionPointEncoder, MaxPoolPointEncoder, ObservationBatch,
                          farthest_point_sampling)
from xil.heads import HEADS, make_head
from xil.storage import load_checkpoint, save_checkpoint
from xil.tasks import (gen_bimodal_reach_dataset, gen_point_cloud_scene, make_observation,
                       mode_actions)
from xil.tensor import Tensor
from xil.trainer import (ModelPolicy, TrainConfig, bench_inference_steps, evaluate_rollouts,
                         loglog_slope, summarize_bench, time_backbone_layer, train)

from checks import (activate, block_fn, causal_leak, fps_beats_random, gradient_suite,
                    joint_sequence_leak, log_sigmoid_gate, record)
from oracles import brute_force_causal_attention, naive_fps, sequential_scan, xlstm_stabilized

TINY = dict(d_model=8, n_heads=2, n_layers=2, n_enc_layers=2, d_state=4, action_horizon=3)

# toy-scale budget for the bimodal reach experiments
REACH_MODEL = dict(d_model=64, n_heads=4, n_layers=2, n_enc_layers=2, d_state=4)
REACH_TRAIN = TrainConfig(steps=2000, batch_size=256, lr=1e-3)
MODE_RADIUS = 0.15
MODE_SAMPLES = 1000
MODE_STEPS = 16

_trained = {}


def reach_data():
    if "data" not in _trained:
        _trained["data"] = gen_bimodal_reach_dataset(1000, seed=0)
    return _trained["data"]


def trained_reach_model(architecture, backbone, head):
    key = (architecture, backbone, head)
    if key not in _trained:
        cfg = ModelConfig(architecture=architecture, backbone=backbone, head=head, **REACH_MODEL)
        t0 = time.perf_counter()
        with T.precision("float32"):
            report, _ = train(cfg, reach_data(), 0, REACH_TRAIN)
        _trained[key] = (report.model, time.perf_counter() - t0)
    return _trained[key]


def verdict(criterion, ok, detail):
    record(criterion, ok, detail)
    assert ok, detail


# -- 1 ------------------------------------------------------------------------

def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    results = list(gradient_suite(np.random.default_rng(1)))
    elapsed = time.perf_counter() - t0
    worst_label, worst = max(results, key=lambda r: r[1])
    ok = worst < 1e-4 and elapsed < 120
    verdict(1, ok, f"{len(results)} checks, worst rel err {worst:.2e} ({worst_label}), {elapsed:.0f}s")


# -- 2 ------------------------------------------------------------------------

def test_criterion_02_causality():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    leaks = {}
    for backbone in BACKBONES:
        for L in (6, 12, 24):
            blk = activate(XBlock(backbone, 8, 4, rng, n_heads=2, d_state=4), rng)
            cond = Tensor(rng.normal(size=(2, 4)))
            leaks[f"xblock_{backbone}_L{L}"] = causal_leak(block_fn(blk, cond),
                                                           rng.normal(size=(2, L, 8)), rng)
        model = activate(build_model(ModelConfig(backbone=backbone, **TINY), 0), rng)
        leaks[f"joint_{backbone}"] = joint_sequence_leak(model, rng)
    elapsed = time.perf_counter() - t0
    worst = max(leaks.values())
    verdict(2, worst < 1e-9 and elapsed < 60,
            f"{len(leaks)} sequences, max earlier-position change {worst:.1e}, {elapsed:.0f}s")


# -- 3 ------------------------------------------------------------------------

def test_criterion_03_oracle_equivalence():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    errs = {}
    for L in (1, 17, 64):
        args = (rng.uniform(0.01, 1.0, (2, L, 3)), -rng.uniform(0.5, 2.0, (3, 4)),
                rng.normal(size=(2, L, 4)), rng.normal(size=(2, L, 4)),
                rng.normal(size=(2, L, 3)), rng.normal(size=3))
        errs[f"scan_L{L}"] = np.abs(selective_scan(*args).data - sequential_scan(*args)).max()
        i, o, z = (rng.normal(0, 2.0, (2, L, 3)) for _ in range(3))
        f = log_sigmoid_gate(rng, (2, L, 3))
        h = xlstm_scan(i, f, o, z).data
        errs[f"xlstm_L{L}"] = max(np.abs(h[s] - xlstm_stabilized(i[s], f[s], o[s], z[s])).max()
                                  for s in range(2))
    for heads, L in ((1, 3), (2, 17), (4, 64)):
        att = SelfAttention(8, heads, rng)
        activate(att, rng)
        x = rng.normal(size=(1, L, 8))
        ref = brute_force_causal_attention(
            x[0], att.q.weight.data, att.k.weight.data, att.v.weight.data, att.out.weight.data,
            att.q.bias.data, att.v.bias.data, att.out.bias.data, heads)
        errs[f"attention_h{heads}_L{L}"] = np.abs(att(Tensor(x)).data[0] - ref).max()
    fps_exact = all(farthest_point_sampling(pts, 32, s).tolist() == naive_fps(pts, 32, s)
                    for pts, s in ((rng.normal(size=(256, 3)), s) for s in (0, 5, 99)))
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    verdict(3, worst < 1e-10 and fps_exact and elapsed < 60,
            f"max deviation {worst:.1e}, FPS exact: {fps_exact}, {elapsed:.0f}s")


# -- 4 ------------------------------------------------------------------------

def test_criterion_04_zero_init_identity():
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    ok = True
    for backbone in BACKBONES:
        for shape in ((1, 1, 8), (3, 5, 8), (2, 9, 8)):
            blk = XBlock(backbone, 8, 6, rng, n_heads=2, d_state=4)
            x = rng.normal(size=shape)
            ok &= np.array_equal(blk(Tensor(x), Tensor(rng.normal(size=(shape[0], 6)))).data, x)
        model = build_model(ModelConfig(architecture="encoder-decoder", backbone=backbone, **TINY), 0)
        obs = ObservationBatch(rng.integers(0, 4, 2), state=rng.normal(size=(2, 1, 2)))
        out = model(obs, rng.normal(size=(2, 3, 2)), np.ones(2)).data
        ok &= not out.any()
    elapsed = time.perf_counter() - t0
    verdict(4, bool(ok) and elapsed < 10, f"exact identity / zero output: {bool(ok)}, {elapsed:.1f}s")


# -- 5 ------------------------------------------------------------------------

def start_state_samples(model, steps=MODE_STEPS):
    obs = make_observation(np.zeros((MODE_SAMPLES, 1, 2)))
    with T.precision("float32"):
        return ModelPolicy(model, steps=steps, seed=1)(obs)[:, 0].astype(np.float64)


def mode_fractions(actions):
    modes = mode_actions()
    inside = [float((np.linalg.norm(actions - m, axis=1) < MODE_RADIUS).mean()) for m in modes]
    near_mean = float((np.linalg.norm(actions - modes.mean(0), axis=1) < MODE_RADIUS).mean())
    return inside, near_mean


MODE_CASES = [(b, h) for h in ("ddpm", "beso", "rf") for b in BACKBONES] + [("transformer", "bc")]


@pytest.mark.parametrize("backbone,head", MODE_CASES)
def test_criterion_05_mode_coverage(backbone, head):
    model, seconds = trained_reach_model("decoder-only", backbone, head)
    inside, near_mean = mode_fractions(start_state_samples(model))
    if head == "bc":
        ok = near_mean >= 0.9
        detail = f"{near_mean:.3f} near the inter-mode mean"
    else:
        ok = min(inside) >= 0.25
        detail = f"mode fractions {inside[0]:.3f} / {inside[1]:.3f}"
    ok &= seconds <= 600
    results = _trained.setdefault("mode_results", {})
    results[(backbone, head)] = (ok, f"{backbone}/{head}: {detail}, trained in {seconds:.0f}s")
    if len(results) == len(MODE_CASES):
        lines = [d for _, d in results.values()]
        record(5, all(o for o, _ in results.values()), "; ".join(lines))
    assert ok, detail


# -- 6 ------------------------------------------------------------------------

def test_criterion_06_closed_loop_success():
    t0 = time.perf_counter()
    rates = {}
    for arch in ARCHITECTURES:
        model, _ = trained_reach_model(arch, "xlstm", "beso")
        with T.precision("float32"):
            rates[arch] = evaluate_rollouts(ModelPolicy(model, steps=4, seed=0), n_episodes=100)
    elapsed = time.perf_counter() - t0
    dec, encdec = rates["decoder-only"], rates["encoder-decoder"]
    ok = dec >= 0.9 and abs(encdec - dec) <= 0.10
    verdict(6, ok, f"decoder-only {dec:.2f}, encoder-decoder {encdec:.2f}, {elapsed:.0f}s")


# -- 7 ------------------------------------------------------------------------

def test_criterion_07_inference_step_scaling():
    cfg = ModelConfig(backbone="transformer", head="beso", d_model=64, n_heads=4, n_layers=2,
                      modalities=("state", "image"))
    with T.precision("float32"):
        model = build_model(cfg, 0)
        activate(model, np.random.default_rng(7), scale=0.05)
        obs = make_observation(np.zeros((1, 1, 2)), cfg.modalities)
        t0 = time.perf_counter()
        rows = bench_inference_steps(model, obs, ("ddpm", "beso", "rf"), (1, 4, 8, 12, 16),
                                     repeats=20, warmup=3)
        elapsed = time.perf_counter() - t0
    s = summarize_bench(rows)
    problems = s.failures(r2_min=0.99, spread_max=0.15, ratio_range=(8.0, 16.0))
    fits = ", ".join(f"{h} R2 {r2:.4f} ratio {s.ratios[h]:.1f}" for h, (_, _, r2) in s.fits.items())
    verdict(7, not problems and elapsed <= 300,
            f"{fits}; spread {100 * s.max_cross_head_spread:.1f}%, {elapsed:.0f}s"
            + (f" [{'; '.join(problems)}]" if problems else ""))


# -- 8 ------------------------------------------------------------------------

def test_criterion_08_complexity_slopes():
    lengths = (256, 512, 1024, 2048)
    t0 = time.perf_counter()
    slopes = {}
    with T.precision("float32"):
        for backbone in BACKBONES:
            times = time_backbone_layer(backbone, lengths, d=64, runs=20)
            slopes[backbone] = loglog_slope(lengths, [times[L] for L in lengths])
    elapsed = time.perf_counter() - t0
    ok = (slopes["transformer"] >= 1.6 and slopes["mamba"] <= 1.2 and slopes["xlstm"] <= 1.2
          and elapsed <= 300)
    verdict(8, ok, ", ".join(f"{b} {v:.2f}" for b, v in slopes.items()) + f", {elapsed:.0f}s")


# -- 9 ------------------------------------------------------------------------

PC_MODEL = dict(d_model=32, n_heads=2, n_layers=1, pc_widths=(32, 64), n_points=64)
PC_TRAIN = TrainConfig(steps=2000, batch_size=64, lr=1e-3)


def test_criterion_09_point_cloud_path():
    rng = np.random.default_rng(9)
    t0 = time.perf_counter()
    invariant = True
    for enc in (MaxPoolPointEncoder(8, rng, widths=(16,)),
                activate(AttentionPointEncoder(8, rng, n_layers=2, n_heads=2), rng)):
        for n in (1, 7, 64):
            pts = rng.normal(size=(2, n, 3))
            perm = rng.permutation(n)
            invariant &= np.array_equal(enc(Tensor(pts)).data, enc(Tensor(pts[:, perm])).data)
    wins = fps_beats_random(trials=100)
    train_set, test_set = gen_point_cloud_scene(2000, seed=0), gen_point_cloud_scene(200, seed=1)
    cfg = ModelConfig(head="bc", modalities=("cloud",), action_horizon=1, action_dim=3,
                      **PC_MODEL)
    report, _ = train(cfg, train_set, 0, PC_TRAIN)
    with T.precision("float32"):
        pred = make_head("bc").sample(report.model, test_set.observations(), steps=1)[:, 0]
    mse = float(((pred - test_set.arrays["centroid"]) ** 2).mean())
    elapsed = time.perf_counter() - t0
    ok = bool(invariant) and wins >= 95 and mse < 0.01 and elapsed <= 600
    verdict(9, ok, f"permutation invariant: {bool(invariant)}, FPS wins {wins}/100, "
                   f"held-out centroid MSE {mse:.4f} after {PC_TRAIN.steps} steps, {elapsed:.0f}s")


# -- 10 -----------------------------------------------------------------------

def same_bits(a, b):
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


def test_criterion_10_configuration_matrix(tmp_path):
    rng = np.random.default_rng(10)
    data = gen_bimodal_reach_dataset(8, seed=0, action_horizon=3)
    t0 = time.perf_counter()
    failures = []
    combos = list(itertools.product(BACKBONES, ARCHITECTURES, HEADS))
    for backbone, arch, head in combos:
        name = f"{backbone}/{arch}/{head}"
        cfg = ModelConfig(architecture=arch, backbone=backbone, head=head, **TINY)
        report, _ = train(cfg, data, 0, TrainConfig(steps=50, batch_size=16, log_every=0))
        model = report.model
        if not np.all(np.isfinite(report.losses)):
            failures.append(f"{name}: non-finite loss")
            continue
        obs = make_observation(rng.normal(0, 0.3, (2, 1, 2)))
        with T.precision("float32"):
            actions = make_head(head).sample(model, obs, steps=2, rng=rng)
        if actions.shape != (2, 3, 2) or not np.all(np.isfinite(actions)):
            failures.append(f"{name}: bad samples")
        path = tmp_path / f"{backbone}-{arch}-{head}.xil"
        save_checkpoint(model, None, path)
        ckpt = load_checkpoint(path, expected=cfg)
        with T.precision("float32"):
            rebuilt = ckpt.build().state_dict()
        if not all(same_bits(v, ckpt.params[k]) and same_bits(v, rebuilt[k])
                   for k, v in model.state_dict().items()):
            failures.append(f"{name}: reload differs")
    elapsed = time.perf_counter() - t0
    verdict(10, not failures and elapsed <= 600,
            f"{len(combos) - len(failures)}/{len(combos)} configurations, {elapsed:.0f}s"
            + (f" [{'; '.join(failures)}]" if failures else ""))
