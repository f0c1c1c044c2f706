"""Command-line entry point: ``xil {gen-data,train,eval,bench,plot}``.

Every command resolves the config (file + overrides + ``--seed``), prints it,
and writes its outputs to ``<out>/<timestamp>-<command>-<confighash>/``.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigOverrideError, config_hash, default_config_path, dump, parse_config
from .architectures import ModelConfig, build_model
from .storage import load_checkpoint, load_dataset, save_dataset
from .tasks import gen_bimodal_reach_dataset, gen_point_cloud_scene, make_observation
from . import trainer as tr

COMMANDS = ("gen-data", "train", "eval", "bench", "plot")


class UserError(Exception):
    """A problem the user can fix; reported without a traceback."""


def _run_dir(out: str, cmd: str, tree: dict) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = Path(out) / f"{stamp}-{cmd}-{config_hash(tree)}"
    i = 1
    while path.exists():
        path = Path(out) / f"{stamp}-{cmd}-{config_hash(tree)}-{i}"
        i += 1
    path.mkdir(parents=True)
    (path / "config.yaml").write_text(dump(tree))
    return path


def resolve_config_path(arg: str | None):
    """A file path, or the name of a packaged config such as ``toy``."""
    if arg is None or Path(arg).exists():
        return arg
    packaged = default_config_path(arg)
    return packaged if packaged.exists() else arg


def model_config(tree: dict) -> ModelConfig:
    pol = dict(tree["policy"])
    task = tree["task"]
    pol["history"] = task["history"]
    if task["name"] == "point_cloud_scene":
        pol.update(modalities=["cloud"], action_horizon=1, action_dim=3)
    elif task.get("images") and "image" not in pol["modalities"]:
        pol["modalities"] = list(pol["modalities"]) + ["image"]
    return ModelConfig.from_dict(pol)


def make_dataset(tree: dict):
    task, seed = tree["task"], tree["seed"]
    pol = tree["policy"]
    if task["name"] == "bimodal_reach":
        return gen_bimodal_reach_dataset(task["n_episodes"], seed, history=task["history"],
                                         action_horizon=pol["action_horizon"],
                                         images=bool(task["images"]))
    if task["name"] == "point_cloud_scene":
        return gen_point_cloud_scene(task["n_samples"], seed)
    raise UserError(f"unknown task {task['name']!r}; valid options: {{bimodal_reach, point_cloud_scene}}")


def _events(run_dir: Path):
    return tr.MetricsLog(run_dir)


def cmd_gen_data(tree, run_dir: Path) -> None:
    log = _events(run_dir)
    ds = make_dataset(tree)
    path = run_dir / "dataset.xil"
    save_dataset(ds, path)
    log.event("gen_data", path=str(path), samples=len(ds))
    log.close()
    print(f"wrote {len(ds)} samples to {path}")


def cmd_train(tree, run_dir: Path) -> None:
    data_path = tree["data"]["path"]
    ds = load_dataset(data_path) if data_path else make_dataset(tree)
    t = tree["trainer"]
    tc = tr.TrainConfig(steps=t["steps"], batch_size=t["batch_size"], lr=t["lr"],
                        optimizer=t["optimizer"], weight_decay=t["weight_decay"],
                        log_every=t["log_every"])
    report, _ = tr.train(model_config(tree), ds, tree["seed"], tc, run_dir=run_dir)
    print(f"final loss: {report.final_loss!r}")
    print(f"checkpoint: {report.checkpoint_path}")


def _need_checkpoint(tree, section: str):
    path = tree[section]["checkpoint"]
    if not path:
        raise UserError(f"set {section}.checkpoint=PATH to a checkpoint written by 'train'")
    return load_checkpoint(path)


def cmd_eval(tree, run_dir: Path) -> None:
    ckpt = _need_checkpoint(tree, "eval")
    if "cloud" in ckpt.config.modalities:
        raise UserError("eval runs reach rollouts; this checkpoint was trained on point clouds")
    log = _events(run_dir)
    e = tree["eval"]
    policy = tr.ModelPolicy(ckpt.build(), steps=e["sampling_steps"], seed=tree["seed"])
    rate = tr.evaluate_rollouts(policy, e["n_episodes"])
    with open(run_dir / "eval.csv", "w") as f:
        f.write(f"metric,value\nsuccess_rate,{rate}\nepisodes,{e['n_episodes']}\n")
    log.event("eval", success_rate=rate, episodes=e["n_episodes"])
    log.close()
    print(f"success rate: {rate:.3f} over {e['n_episodes']} episodes")


def cmd_bench(tree, run_dir: Path) -> None:
    b = tree["bench"]
    if b["checkpoint"]:
        model = load_checkpoint(b["checkpoint"]).build()
    else:
        model = build_model(model_config(tree), tree["seed"])
    c = model.config
    if "cloud" in c.modalities:
        raise UserError("bench supports reach-task observations only")
    obs = make_observation(np.zeros((b["batch_size"], c.history, 2)), c.modalities)
    log = _events(run_dir)
    rows = tr.bench_inference_steps(model, obs, b["heads"], b["steps"], b["repeats"], b["warmup"],
                                    tree["seed"])
    tr.write_bench_csv(rows, run_dir / "bench.csv")
    tr.plot_bench(rows, run_dir / "bench.svg")
    summary = tr.summarize_bench(rows)
    for h, (a, slope, r2) in summary.fits.items():
        print(f"{h}: t = {a:.3f} + {slope:.3f}*steps ms (R^2 {r2:.4f}), "
              f"time({max(b['steps'])})/time({min(b['steps'])}) = {summary.ratios[h]:.2f}")
    print(f"max cross-head spread: {100 * summary.max_cross_head_spread:.1f}%")
    log.event("bench", fits=summary.fits, ratios=summary.ratios,
              spread=summary.max_cross_head_spread)
    log.close()
    print(f"wrote {run_dir / 'bench.csv'} and {run_dir / 'bench.svg'}")
    problems = summary.failures(ratio_range=(0.0, float("inf")))
    if problems:
        raise UserError("benchmark checks failed: " + "; ".join(problems))


def cmd_plot(tree, run_dir: Path) -> None:
    src = tree["plot"]["csv"]
    if not src:
        raise UserError("set plot.csv=PATH to a bench CSV")
    rows = tr.read_bench_csv(src)
    out = run_dir / "bench.svg"
    tr.plot_bench(rows, out)
    log = _events(run_dir)
    log.event("plot", source=str(src), path=str(out))
    log.close()
    print(f"wrote {out}")


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "bench": cmd_bench, "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="YAML config file or packaged name (default, toy)")
    common.add_argument("--seed", type=int, help="overrides the config's seed")
    common.add_argument("--out", metavar="DIR", default="runs", help="parent of run directories")
    common.add_argument("overrides", nargs="*", metavar="key.path=value")
    parser = argparse.ArgumentParser(prog="xil", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"gen-data": "generate a task dataset", "train": "train a policy",
             "eval": "closed-loop success rate of a checkpoint",
             "bench": "sampling latency vs inference steps", "plot": "SVG from a bench CSV"}
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        tree = parse_config(resolve_config_path(args.config), args.overrides)
        if args.seed is not None:
            tree["seed"] = args.seed
        print(dump(tree), end="")
        run_dir = _run_dir(args.out, args.command, tree)
        print(f"run directory: {run_dir}")
        HANDLERS[args.command](tree, run_dir)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except Exception as e:  # user-facing: message only, no traceback
        if os.environ.get("XIL_DEBUG"):
            raise
        kind = "error" if isinstance(e, (UserError, ConfigOverrideError)) else type(e).__name__
        print(f"{kind}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
