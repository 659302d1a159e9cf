"""Deterministic training loop and ablation harness.

Everything runs in float64 on a fixed thread count, so two runs with the
same config and dataset produce byte-identical metrics logs and
checkpoints. The optimizer is a hand-rolled Adam that touches only the
parameters the freeze policy exposes; checkpoints are a one-line JSON
header plus a raw little-endian payload and round-trip bit-exactly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .backbone import AGGREGATIONS, FREEZE_POLICIES
from .config import TrainConfig
from .core import BEVGridSpec, CameraParams, MapClass, map_to_dict
from .decoder import predictions_to_map
from .evaluator import APReport, evaluate, save_report
from .losses import targets_from_sample, total_loss
from .model import MapModel
from .scenes import dataset_digest, load_manifest, load_scene

CHECKPOINT_FORMAT_VERSION = 1
METRIC_KEYS = ("l_pts", "l_cls", "l_dir", "l_bevseg", "l_pvseg", "l_surf", "total")
ABLATION_VARIANTS = ("arss_on_off", "aggregation", "freeze_policy")


def thread_count() -> int:
    """Worker cap from MAPFM_THREADS; defaults to 1 for reproducibility."""
    raw = os.environ.get("MAPFM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"MAPFM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError("MAPFM_THREADS must be at least 1")
    return n


@dataclass
class LoadedDataset:
    root: Path
    manifest: dict
    grid: BEVGridSpec
    rig: tuple
    samples: list


def load_dataset(root) -> LoadedDataset:
    root = Path(root)
    manifest = load_manifest(root)
    return LoadedDataset(
        root=root,
        manifest=manifest,
        grid=BEVGridSpec.from_dict(manifest["grid"]),
        rig=tuple(CameraParams.from_dict(c) for c in manifest["rig"]),
        samples=[load_scene(root, manifest, i) for i in range(manifest["num_scenes"])],
    )


def split_indices(n: int, holdout_fraction: float) -> tuple[list[int], list[int]]:
    """Train/held-out split; the held-out part is the tail by index."""
    n_hold = int(n * holdout_fraction)
    if n - n_hold < 1:
        raise ValueError("holdout split leaves no training scenes")
    cut = n - n_hold
    return list(range(cut)), list(range(cut, n))


def images_to_tensor(sample) -> torch.Tensor:
    """SceneSample images -> (M, 3, H, W) float64 tensor."""
    arr = np.stack(sample.images).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr))


class Adam:
    """Adam with beta=(0.9, 0.999), eps=1e-8, no weight decay.

    Holds (name, parameter) pairs so its state can be checkpointed by
    name next to the model parameters.
    """

    def __init__(self, named_params, lr: float):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1 = 0.9
        self.beta2 = 0.999
        self.eps = 1e-8
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.named_params}
        self.v = {n: torch.zeros_like(p) for n, p in self.named_params}

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.named_params:
            if p.grad is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m.mul_(b1).add_(p.grad, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(p.grad, p.grad, value=1.0 - b2)
            m_hat = m / (1.0 - b1**self.t)
            v_hat = v / (1.0 - b2**self.t)
            p.add_(-self.lr * m_hat / (v_hat.sqrt() + self.eps))


# --- checkpoint serialization ------------------------------------------------


def checkpoint_state(model: MapModel, optimizer: Adam, cfg: TrainConfig, step: int) -> dict:
    params = {
        n: p.detach().cpu().numpy().astype("<f8") for n, p in model.named_parameters()
    }
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": step,
        "config": cfg.to_dict(),
        "params": params,
        "adam": {
            "step": optimizer.t,
            "m": {n: t.numpy().astype("<f8") for n, t in optimizer.m.items()},
            "v": {n: t.numpy().astype("<f8") for n, t in optimizer.v.items()},
        },
    }


def save_checkpoint(state: dict, path) -> None:
    """One JSON header line (name -> dtype/shape/offset), then the raw
    little-endian float64 payload, arrays sorted by name within kind."""
    entries = []
    blobs = []
    offset = 0

    def add(kind: str, name: str, arr: np.ndarray) -> None:
        nonlocal offset
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append(
            {"kind": kind, "name": name, "dtype": "<f8", "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)

    for name in sorted(state["params"]):
        add("param", name, state["params"][name])
    for name in sorted(state["adam"]["m"]):
        add("adam_m", name, state["adam"]["m"][name])
    for name in sorted(state["adam"]["v"]):
        add("adam_v", name, state["adam"]["v"][name])
    header = {
        "format_version": state["format_version"],
        "step": state["step"],
        "adam_step": state["adam"]["step"],
        "config": state["config"],
        "arrays": entries,
    }
    with open(Path(path), "wb") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        f.write(b"\n")
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> dict:
    with open(Path(path), "rb") as f:
        header_line = f.readline()
        payload = f.read()
    header = json.loads(header_line)
    version = header.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version: {version!r}")
    state = {
        "format_version": version,
        "step": header["step"],
        "config": header["config"],
        "params": {},
        "adam": {"step": header["adam_step"], "m": {}, "v": {}},
    }
    dest = {"param": state["params"], "adam_m": state["adam"]["m"], "adam_v": state["adam"]["v"]}
    for entry in header["arrays"]:
        name = entry["name"]
        nbytes = 8 * math.prod(entry["shape"])
        chunk = payload[entry["offset"] : entry["offset"] + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"checkpoint payload truncated at field {name!r}")
        dest[entry["kind"]][name] = (
            np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).copy()
        )
    return state


def apply_checkpoint(model: MapModel, state: dict, optimizer: Adam | None = None) -> None:
    """Copy checkpointed arrays back into a model (and optimizer)."""
    model_names = {n for n, _ in model.named_parameters()}
    ckpt_names = set(state["params"])
    if model_names != ckpt_names:
        missing = sorted(model_names - ckpt_names)
        extra = sorted(ckpt_names - model_names)
        raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    with torch.no_grad():
        for name, p in model.named_parameters():
            arr = state["params"][name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for parameter {name!r}")
            p.copy_(torch.from_numpy(arr))
    if optimizer is not None:
        if set(optimizer.m) != set(state["adam"]["m"]):
            raise ValueError("optimizer state does not match the trainable parameter set")
        optimizer.t = state["adam"]["step"]
        for name in optimizer.m:
            optimizer.m[name] = torch.from_numpy(state["adam"]["m"][name].copy())
            optimizer.v[name] = torch.from_numpy(state["adam"]["v"][name].copy())


# --- training loop -----------------------------------------------------------


def _index_stream(indices: list, seed: int):
    """Endless stream over indices, reshuffled each pass from one rng."""
    rng = np.random.default_rng(seed)
    while True:
        for k in rng.permutation(len(indices)):
            yield indices[k]


def _metrics_line(step: int, reports: list) -> dict:
    line = {"step": step}
    dicts = [r.to_dict() for r in reports]
    for key in METRIC_KEYS:
        line[key] = sum(d[key] for d in dicts) / len(dicts)
    return line


def predict_maps(model, samples, indices, grid, score_threshold) -> list:
    preds = []
    with torch.no_grad():
        for i in indices:
            output = model(images_to_tensor(samples[i]))
            preds.append(predictions_to_map(output.decoder, grid, score_threshold))
    return preds


def evaluate_model(model, samples, indices, grid, score_threshold, eval_cfg) -> APReport:
    preds = predict_maps(model, samples, indices, grid, score_threshold)
    return evaluate(preds, [samples[i].gt_map for i in indices], eval_cfg)


def _write_maps(path, maps) -> None:
    with open(Path(path), "w", encoding="utf-8") as f:
        json.dump({"samples": [map_to_dict(m) for m in maps]}, f, indent=1, sort_keys=True)
        f.write("\n")


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint_path: Path
    metrics_path: Path
    report: APReport
    report_path: Path
    eval_indices: list
    model: MapModel
    optimizer: Adam


def train(cfg: TrainConfig, data_root, out_dir) -> TrainResult:
    torch.set_num_threads(thread_count())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(data_root)
    if data.grid.to_dict() != cfg.grid.to_dict():
        raise ValueError("config grid does not match dataset grid")

    torch.manual_seed(cfg.seed)
    model = MapModel(cfg.grid, data.rig, cfg.backbone, cfg.bev, cfg.decoder)
    optimizer = Adam(model.trainable_parameters(), cfg.learning_rate)

    train_idx, hold_idx = split_indices(len(data.samples), cfg.holdout_fraction)
    eval_idx = hold_idx or train_idx
    n_pts = cfg.decoder.points_per_element
    tensors = {i: images_to_tensor(data.samples[i]) for i in train_idx}
    targets = {i: targets_from_sample(data.samples[i], cfg.grid, n_pts) for i in train_idx}

    save_checkpoint(checkpoint_state(model, optimizer, cfg, 0), out / "checkpoint_step_0.ckpt")

    order = _index_stream(train_idx, cfg.seed)
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as log:
        for step in range(1, cfg.steps + 1):
            batch = [next(order) for _ in range(cfg.batch_size)]
            optimizer.zero_grad()
            totals = []
            reports = []
            for i in batch:
                output = model(tensors[i])
                total, report, _ = total_loss(output, targets[i], cfg.weights, cfg.arss_enabled)
                totals.append(total)
                reports.append(report)
            line = _metrics_line(step, reports)
            if not all(math.isfinite(line[k]) for k in METRIC_KEYS):
                dump_path = out / "failure_dump.json"
                with open(dump_path, "w", encoding="utf-8") as f:
                    json.dump(
                        {"step": step, "batch": batch, "metrics": line}, f, indent=1, sort_keys=True
                    )
                    f.write("\n")
                raise RuntimeError(f"non-finite loss at step {step}; diagnostics in {dump_path}")
            log.write(json.dumps(line) + "\n")
            batch_total = totals[0] if len(totals) == 1 else torch.stack(totals).mean()
            batch_total.backward()
            optimizer.step()
            if cfg.eval_every and step % cfg.eval_every == 0 and step < cfg.steps:
                save_checkpoint(
                    checkpoint_state(model, optimizer, cfg, step),
                    out / f"checkpoint_step_{step}.ckpt",
                )
                report = evaluate_model(
                    model, data.samples, eval_idx, cfg.grid, cfg.score_threshold, cfg.eval
                )
                save_report(report, out / f"eval_step_{step}.json")

    checkpoint_path = out / "checkpoint.ckpt"
    save_checkpoint(checkpoint_state(model, optimizer, cfg, cfg.steps), checkpoint_path)
    preds = predict_maps(model, data.samples, eval_idx, cfg.grid, cfg.score_threshold)
    gts = [data.samples[i].gt_map for i in eval_idx]
    final_report = evaluate(preds, gts, cfg.eval)
    report_path = out / "eval_final.json"
    save_report(final_report, report_path)
    # exported maps let `eval` rescore this run from files alone
    _write_maps(out / "predictions.json", preds)
    _write_maps(out / "eval_gt.json", gts)
    return TrainResult(
        out_dir=out,
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
        report=final_report,
        report_path=report_path,
        eval_indices=eval_idx,
        model=model,
        optimizer=optimizer,
    )


# --- ablation harness --------------------------------------------------------


def _variant_settings(variant: str, base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    if variant == "arss_on_off":
        return [
            ("arss_on", replace(base, arss_enabled=True)),
            ("arss_off", replace(base, arss_enabled=False)),
        ]
    if variant == "aggregation":
        # tap_blocks resets so each aggregation gets its own default taps
        return [
            (agg, replace(base, backbone=replace(base.backbone, aggregation=agg, tap_blocks=())))
            for agg in AGGREGATIONS
        ]
    if variant == "freeze_policy":
        return [
            (pol, replace(base, backbone=replace(base.backbone, freeze_policy=pol)))
            for pol in FREEZE_POLICIES
        ]
    raise ValueError(f"unknown ablation variant: {variant!r}")


def ablation_table_text(table: dict) -> str:
    lines = [
        f"variant: {table['variant']}",
        f"dataset sha256: {table['dataset_sha256']}",
        "seeds: " + ", ".join(str(s) for s in table["seeds"]),
        "",
        f"{'setting':<18}{'AP_div':>8}{'AP_ped':>8}{'AP_bound':>10}{'mAP':>8}",
    ]
    class_order = [MapClass.DIVIDER.value, MapClass.PED_CROSSING.value, MapClass.BOUNDARY.value]
    for s in table["summary"]:
        rows = [r for r in table["rows"] if r["label"] == s["label"]]
        means = [sum(r["ap_class"][c] for r in rows) / len(rows) for c in class_order]
        cells = f"{100 * means[0]:>8.1f}{100 * means[1]:>8.1f}{100 * means[2]:>10.1f}"
        lines.append(f"{s['label']:<18}" + cells + f"{100 * s['mean_map']:>8.1f}")
    if "delta_map" in table:
        lines.append("")
        lines.append(f"ARSS on vs off mAP delta: {100 * table['delta_map']:+.1f}")
    return "\n".join(lines) + "\n"


def run_ablation(variant: str, base_cfg: TrainConfig, data_root, out_dir, seeds=None) -> dict:
    """Train every setting of one ablation axis on the same data.

    Each (setting, seed) pair trains in its own subdirectory; the
    comparison table lands in ablation.json / ablation.txt with the
    dataset digest recorded for provenance.
    """
    seed_list = [int(s) for s in seeds] if seeds else [base_cfg.seed]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = dataset_digest(data_root)
    settings = _variant_settings(variant, base_cfg)
    rows = []
    for label, setting_cfg in settings:
        for seed in seed_list:
            run_cfg = replace(setting_cfg, seed=seed)
            result = train(run_cfg, data_root, out / f"{label}_seed{seed}")
            rows.append(
                {
                    "label": label,
                    "seed": seed,
                    "dataset_sha256": digest,
                    "ap_class": dict(result.report.ap_class),
                    "map": result.report.map,
                }
            )
    summary = []
    for label, _ in settings:
        vals = [r["map"] for r in rows if r["label"] == label]
        summary.append({"label": label, "mean_map": sum(vals) / len(vals), "num_seeds": len(vals)})
    table = {
        "variant": variant,
        "dataset_sha256": digest,
        "seeds": seed_list,
        "rows": rows,
        "summary": summary,
    }
    if variant == "arss_on_off":
        by_label = {s["label"]: s["mean_map"] for s in summary}
        table["delta_map"] = by_label["arss_on"] - by_label["arss_off"]
    with open(out / "ablation.json", "w", encoding="utf-8") as f:
        json.dump(table, f, indent=1, sort_keys=True)
        f.write("\n")
    (out / "ablation.txt").write_text(ablation_table_text(table), encoding="utf-8")
    return table
