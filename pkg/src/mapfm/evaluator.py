"""Chamfer-distance average precision over the three map classes.

Predictions are pooled across samples per class, ranked by confidence
(ties broken by lower sample index, then lower element index), and
greedily matched: a prediction is a true positive when its Chamfer
distance to some still-unmatched ground-truth element of the same class
in the same sample is below the threshold; the closest such element is
consumed. AP integrates the precision envelope over all recall points.
Class APs average over the thresholds, mAP averages over classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    CLASS_ORDER,
    MapClass,
    ScoredMap,
    VectorMap,
    chamfer_distance,
    map_from_dict,
    polyline_length,
)

_DEGENERATE_EPS = 1e-12


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = (0.5, 1.0, 1.5)
    n_interp: int = 100

    def __post_init__(self):
        t = tuple(self.thresholds)
        if not t or any(x <= 0 for x in t) or list(t) != sorted(t):
            raise ValueError("thresholds must be positive and ascending")
        if self.n_interp < 2:
            raise ValueError("n_interp must be at least 2")
        object.__setattr__(self, "thresholds", t)

    def to_dict(self) -> dict:
        return {"thresholds": list(self.thresholds), "n_interp": self.n_interp}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        kw = dict(d)
        if "thresholds" in kw:
            kw["thresholds"] = tuple(kw["thresholds"])
        return cls(**kw)


@dataclass
class APReport:
    ap: dict  # class name -> {threshold: value}
    ap_class: dict = field(default_factory=dict)  # class name -> mean over thresholds
    map: float = 0.0

    def __post_init__(self):
        if not self.ap_class:
            self.ap_class = {
                name: sum(vals.values()) / len(vals) for name, vals in self.ap.items()
            }
        if not self.map:
            self.map = sum(self.ap_class.values()) / len(self.ap_class)

    def to_dict(self) -> dict:
        return {
            "ap": {c: {f"{t:g}": v for t, v in vals.items()} for c, vals in self.ap.items()},
            "ap_class": dict(self.ap_class),
            "map": self.map,
        }

    def to_table(self) -> str:
        """One-row percent table with per-class AP columns and mAP."""
        cols = ["AP_div", "AP_ped", "AP_bound", "mAP"]
        vals = [
            self.ap_class[MapClass.DIVIDER.value],
            self.ap_class[MapClass.PED_CROSSING.value],
            self.ap_class[MapClass.BOUNDARY.value],
            self.map,
        ]
        header = "  ".join(f"{c:>8}" for c in cols)
        row = "  ".join(f"{100.0 * v:8.1f}" for v in vals)
        return header + "\n" + row


def _class_elements(vmap, cls: MapClass, scored: bool):
    out = []
    if scored:
        for idx, (elem, score) in enumerate(vmap.elements):
            if elem.class_label is cls:
                out.append((idx, elem, score))
    else:
        for idx, elem in enumerate(vmap.elements):
            if elem.class_label is cls:
                out.append((idx, elem, None))
    return out


def ap_at_threshold(
    preds: list[ScoredMap],
    gts: list[VectorMap],
    cls: MapClass,
    tau: float,
    n_interp: int,
) -> float:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction samples vs {len(gts)} ground truth")
    ranked = []  # (-score, sample idx, element idx, element)
    gt_pool = []  # per sample: list of elements of this class
    for s, (pm, gm) in enumerate(zip(preds, gts)):
        for idx, elem, score in _class_elements(pm, cls, scored=True):
            ranked.append((-score, s, idx, elem))
        gt_pool.append([e for _, e, _ in _class_elements(gm, cls, scored=False)])
    n_gt = sum(len(g) for g in gt_pool)
    if n_gt == 0:
        return 1.0 if not ranked else 0.0
    if not ranked:
        return 0.0
    ranked.sort(key=lambda r: (r[0], r[1], r[2]))

    matched = [np.zeros(len(g), dtype=bool) for g in gt_pool]
    flags = []  # True for TP in rank order
    for _, s, _, elem in ranked:
        best = None
        if polyline_length(elem.points, closed=elem.closed) > _DEGENERATE_EPS:
            for g_idx, gt_elem in enumerate(gt_pool[s]):
                if matched[s][g_idx]:
                    continue
                cd = chamfer_distance(
                    elem.points,
                    gt_elem.points,
                    n_interp,
                    closed_a=elem.closed,
                    closed_b=gt_elem.closed,
                )
                if cd < tau and (best is None or cd < best[0]):
                    best = (cd, g_idx)
        if best is None:
            flags.append(False)
        else:
            matched[s][best[1]] = True
            flags.append(True)

    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # all-point interpolation: integrate the running-max precision
    # envelope over every recall increment
    ap = 0.0
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    for i in range(len(flags)):
        if flags[i]:
            ap += (recall[i] - prev_r) * env[i]
            prev_r = recall[i]
    return float(ap)


def evaluate(preds: list[ScoredMap], gts: list[VectorMap], cfg: EvalConfig) -> APReport:
    ap = {}
    for cls in CLASS_ORDER:
        ap[cls.value] = {
            float(t): ap_at_threshold(preds, gts, cls, t, cfg.n_interp)
            for t in cfg.thresholds
        }
    return APReport(ap=ap)


def load_maps_file(path) -> list:
    """Read a map JSON file: either one map or {"samples": [map, ...]}."""
    with open(Path(path), encoding="utf-8") as f:
        data = json.load(f)
    if isinstance(data, dict) and "samples" in data:
        return [map_from_dict(d) for d in data["samples"]]
    return [map_from_dict(data)]


def save_report(report: APReport, path) -> None:
    with open(Path(path), "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
