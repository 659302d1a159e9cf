"""Command-line front end: gen / train / eval / ablate / plot.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every command
leaves a machine-readable JSON artifact next to anything it prints.
MAPFM_THREADS caps worker threads (default 1, which keeps runs
bit-reproducible).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .config import TrainConfig, default_grid
from .core import BEVGridSpec
from .evaluator import EvalConfig, evaluate, load_maps_file, save_report
from .scenes import (
    RenderConfig,
    SceneGenConfig,
    build_dataset,
    dataset_digest,
    make_camera_rig,
)
from .trainer import ABLATION_VARIANTS, run_ablation, thread_count, train


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage problems; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _scene_config_from_file(path) -> tuple[SceneGenConfig, RenderConfig]:
    """Scene-generation TOML: [grid], [rig], [render], rest top-level."""
    with open(Path(path), "rb") as f:
        data = tomllib.load(f)
    grid = BEVGridSpec.from_dict(data["grid"]) if "grid" in data else default_grid()
    rig_kw = dict(data.get("rig", {}))
    for key in ("image_size", "yaw_degrees"):
        if key in rig_kw:
            rig_kw[key] = tuple(rig_kw[key])
    rig = make_camera_rig(**rig_kw)
    render = RenderConfig.from_dict(data["render"]) if "render" in data else RenderConfig()
    scene_kw = {k: v for k, v in data.items() if k not in ("grid", "rig", "render")}
    for key, val in scene_kw.items():
        if isinstance(val, list):
            scene_kw[key] = tuple(val)
    return SceneGenConfig(grid=grid, rig=rig, **scene_kw), render


def _cmd_gen(args) -> int:
    if args.config:
        scene_cfg, render_cfg = _scene_config_from_file(args.config)
    else:
        scene_cfg = SceneGenConfig(grid=default_grid(), rig=make_camera_rig())
        render_cfg = RenderConfig()
    out = Path(args.out)
    build_dataset(scene_cfg, args.num_scenes, out, master_seed=args.seed, render_cfg=render_cfg)
    summary = {
        "num_scenes": args.num_scenes,
        "seed": args.seed,
        "out": str(out),
        "dataset_sha256": dataset_digest(out),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_train(args) -> int:
    cfg = TrainConfig.from_toml(args.config) if args.config else TrainConfig()
    result = train(cfg, args.data, args.out)
    summary = {
        "steps": cfg.steps,
        "dataset_sha256": dataset_digest(args.data),
        "eval_indices": result.eval_indices,
        "map": result.report.map,
        "checkpoint": str(result.checkpoint_path),
        "metrics": str(result.metrics_path),
    }
    with open(Path(args.out) / "train_summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    print(result.report.to_table())
    print(f"mAP {result.report.map:.3f}")
    return 0


def _parse_thresholds(raw: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in raw.split(","))
    except ValueError:
        raise ValueError(f"bad threshold list: {raw!r}") from None


def _cmd_eval(args) -> int:
    preds = load_maps_file(args.pred)
    gts = load_maps_file(args.gt)
    cfg = EvalConfig(thresholds=_parse_thresholds(args.thresholds))
    report = evaluate(preds, gts, cfg)
    if args.out:
        out = Path(args.out)
        path = out if out.suffix == ".json" else out / "eval_report.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_report(report, path)
    print(report.to_table())
    print(f"mAP {report.map:.3f}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = TrainConfig.from_toml(args.config) if args.config else TrainConfig()
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    table = run_ablation(args.variant, cfg, args.data, args.out, seeds=seeds)
    print((Path(args.out) / "ablation.txt").read_text(), end="")
    return 0 if table else 2


def _cmd_plot(args) -> int:
    report = args.report
    if report is None:
        candidate = Path(args.metrics).parent / "eval_final.json"
        report = candidate if candidate.exists() else None
    from .plots import render_plots

    written = render_plots(args.metrics, args.out, report_path=report)
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mapfm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_gen = sub.add_parser("gen", help="generate a synthetic scene dataset")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--num-scenes", type=int, required=True)
    p_gen.add_argument("--config", default=None, help="scene-generation TOML")
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=_cmd_gen)

    p_train = sub.add_parser("train", help="train a model on a dataset")
    p_train.add_argument("--config", default=None, help="training TOML")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="score predictions against ground truth")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--thresholds", default="0.5,1.0,1.5")
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=_cmd_eval)

    p_ablate = sub.add_parser("ablate", help="run one ablation axis")
    p_ablate.add_argument("--variant", required=True, choices=ABLATION_VARIANTS)
    p_ablate.add_argument("--config", default=None, help="training TOML")
    p_ablate.add_argument("--data", required=True)
    p_ablate.add_argument("--out", required=True)
    p_ablate.add_argument("--seeds", default=None, help="comma-separated seed list")
    p_ablate.set_defaults(func=_cmd_ablate)

    p_plot = sub.add_parser("plot", help="render loss curves and AP bars as SVG")
    p_plot.add_argument("--metrics", required=True)
    p_plot.add_argument("--report", default=None, help="AP report JSON")
    p_plot.add_argument("--out", required=True)
    p_plot.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gen" and args.num_scenes < 1:
            parser.error("--num-scenes must be at least 1")
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        import torch

        torch.set_num_threads(thread_count())
        return args.func(args)
    except Exception as exc:
        print(f"mapfm: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
