"""Set matching and the multi-task training loss.

Predicted elements are matched to ground truth by Hungarian assignment
over a cost mixing classification (focal, DETR convention pos-minus-neg)
and point regression (mean L1, minimized over forward/reverse traversal).
The total loss combines matched point L1, focal classification over all
instances, edge-direction cosine, BCE over the auxiliary BEV-line and
perspective lane masks, and a Dice term summed over the two road-surface
masks. Decoder supervision is applied per layer and averaged; the
segmentation terms are computed once.

All losses work on float64 tensors and reduce in a fixed order so runs
are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F
from scipy.optimize import linear_sum_assignment

from .core import CLASS_INDEX, BEVGridSpec
from .decoder import normalize_points
from .model import ModelOutput

FORWARD = "forward"
REVERSE = "reverse"


@dataclass(frozen=True)
class LossWeights:
    pts: float = 5.0
    cls: float = 2.0
    dir: float = 0.005
    bevseg: float = 1.0
    pvseg: float = 1.0
    surf: float = 2.0

    def __post_init__(self):
        if min(self.pts, self.cls, self.dir, self.bevseg, self.pvseg, self.surf) < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return {
            "pts": self.pts,
            "cls": self.cls,
            "dir": self.dir,
            "bevseg": self.bevseg,
            "pvseg": self.pvseg,
            "surf": self.surf,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


@dataclass
class MatchResult:
    pairs: list  # of (pred index, gt index, perm in {forward, reverse})
    unmatched_preds: list

    def __post_init__(self):
        preds = [p for p, _, _ in self.pairs]
        gts = [g for _, g, _ in self.pairs]
        if len(set(preds)) != len(preds) or len(set(gts)) != len(gts):
            raise ValueError("duplicate index in match result")


@dataclass
class LossReport:
    l_pts: float
    l_cls: float
    l_dir: float
    l_bevseg: float
    l_pvseg: float
    l_surf: float
    total: float

    def to_dict(self) -> dict:
        return {
            "l_pts": self.l_pts,
            "l_cls": self.l_cls,
            "l_dir": self.l_dir,
            "l_bevseg": self.l_bevseg,
            "l_pvseg": self.l_pvseg,
            "l_surf": self.l_surf,
            "total": self.total,
        }

    def recompute_total(self, weights: LossWeights) -> float:
        return (
            weights.pts * self.l_pts
            + weights.cls * self.l_cls
            + weights.dir * self.l_dir
            + weights.bevseg * self.l_bevseg
            + weights.pvseg * self.l_pvseg
            + weights.surf * self.l_surf
        )


def point_cost(pred_points, gt_points) -> tuple[float, str]:
    """Mean per-point L1 distance, minimized over traversal direction.

    Ties prefer forward. The mean uses correctly rounded summation so the
    value is independent of term order and bit-reproducible against any
    oracle that evaluates the same per-point terms.
    """
    p = _as_array(pred_points)
    g = _as_array(gt_points)
    if p.shape != g.shape:
        raise ValueError(f"point shapes differ: {p.shape} vs {g.shape}")
    fwd = _mean_l1(p, g)
    rev = _mean_l1(p, g[::-1])
    if rev < fwd:
        return rev, REVERSE
    return fwd, FORWARD


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _mean_l1(a: np.ndarray, b: np.ndarray) -> float:
    d = np.abs(a - b)
    return math.fsum(d[:, 0] + d[:, 1]) / len(a)


def hungarian(cost_matrix) -> list[tuple[int, int]]:
    """Min-cost assignment of min(R, C) pairs; empty matrix gives []."""
    cost = np.asarray(cost_matrix, dtype=np.float64)
    if cost.size == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


def focal_cost_matrix(
    class_logits: torch.Tensor,
    gt_classes: torch.Tensor,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> torch.Tensor:
    """(N, 3) logits x (k,) class ids -> (N, k) focal matching cost."""
    x = class_logits
    pos = alpha * torch.sigmoid(-x).pow(gamma) * F.softplus(-x)
    neg = (1.0 - alpha) * torch.sigmoid(x).pow(gamma) * F.softplus(x)
    return (pos - neg)[:, gt_classes]


def point_cost_matrix(
    pred_points: torch.Tensor, gt_points: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(N, n, 2) x (k, n, 2) -> (N, k) min costs and (N, k) bool reverse flags."""
    diff_f = (pred_points.unsqueeze(1) - gt_points.unsqueeze(0)).abs()
    fwd = diff_f.sum(dim=-1).mean(dim=-1)
    diff_r = (pred_points.unsqueeze(1) - gt_points.flip(1).unsqueeze(0)).abs()
    rev = diff_r.sum(dim=-1).mean(dim=-1)
    return torch.minimum(fwd, rev), rev < fwd


def match_instances(
    class_logits: torch.Tensor,
    points: torch.Tensor,
    gt_classes: torch.Tensor,
    gt_points: torch.Tensor,
    lambda_cls: float = 2.0,
    lambda_pts: float = 5.0,
) -> MatchResult:
    """Hungarian-match decoder instances to ground-truth elements."""
    n = class_logits.shape[0]
    if gt_classes.numel() == 0:
        return MatchResult(pairs=[], unmatched_preds=list(range(n)))
    with torch.no_grad():
        pts_cost, use_rev = point_cost_matrix(points, gt_points)
        cost = lambda_cls * focal_cost_matrix(class_logits, gt_classes) + lambda_pts * pts_cost
    assignment = hungarian(cost.numpy())
    pairs = [
        (i, g, REVERSE if bool(use_rev[i, g]) else FORWARD) for i, g in assignment
    ]
    matched = {i for i, _, _ in pairs}
    return MatchResult(
        pairs=pairs, unmatched_preds=[i for i in range(n) if i not in matched]
    )


def dice_loss(prob: torch.Tensor, gt: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    if prob.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {tuple(prob.shape)} vs {tuple(gt.shape)}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    inter = (prob * gt).sum()
    return 1.0 - (2.0 * inter + eps) / (prob.sum() + gt.sum() + eps)


def focal_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> torch.Tensor:
    """Sigmoid focal loss, mean over every (instance, class) entry."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1.0 - p) * (1.0 - targets)
    alpha_t = alpha * targets + (1.0 - alpha) * (1.0 - targets)
    return (alpha_t * (1.0 - p_t).pow(gamma) * ce).mean()


def seg_ce_loss(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy averaged over pixels and classes."""
    if logits.shape != gt.shape:
        raise ValueError(f"seg shapes differ: {tuple(logits.shape)} vs {tuple(gt.shape)}")
    return F.binary_cross_entropy_with_logits(logits, gt, reduction="mean")


def direction_loss(pred_points: torch.Tensor, gt_points: torch.Tensor) -> torch.Tensor:
    """Mean over edges of 1 - cosine(pred edge, gt edge).

    The ground truth must already be in the traversal order chosen by the
    matcher. Edges of zero length have no direction and contribute 1.
    """
    pe = pred_points[1:] - pred_points[:-1]
    ge = gt_points[1:] - gt_points[:-1]
    with torch.no_grad():
        ok = (pe.norm(dim=-1) > 1e-12) & (ge.norm(dim=-1) > 1e-12)
    n_edges = pe.shape[0]
    degenerate = float(n_edges - int(ok.sum()))
    if not bool(ok.any()):
        return torch.ones((), dtype=pred_points.dtype)
    # norms are taken only on surviving edges so no gradient ever flows
    # through a norm evaluated at zero
    pe = pe[ok]
    ge = ge[ok]
    cos = (pe * ge).sum(dim=-1) / (pe.norm(dim=-1) * ge.norm(dim=-1))
    return ((1.0 - cos).sum() + degenerate) / n_edges


@dataclass
class TrainingTargets:
    """Ground truth for one sample, in loss-ready tensor form."""

    gt_classes: torch.Tensor  # (k,) int64
    gt_points: torch.Tensor  # (k, n, 2) normalized to (0,1)
    surf_masks: torch.Tensor  # (2, rows, cols): drivable, ped crossing
    line_masks: torch.Tensor  # (3, rows, cols) in class order
    pv_masks: torch.Tensor  # (M, 1, h, w)


def targets_from_sample(sample, grid: BEVGridSpec, n_points: int) -> TrainingTargets:
    """Resample and normalize a SceneSample's ground truth for the losses."""
    from .core import CLASS_ORDER, resample_polyline

    classes = []
    pts = []
    for elem in sample.gt_map.elements:
        classes.append(CLASS_INDEX[elem.class_label])
        resampled = resample_polyline(elem.points, n_points, closed=elem.closed)
        pts.append(normalize_points(resampled, grid))
    gt_points = (
        torch.from_numpy(np.stack(pts)) if pts else torch.zeros(0, n_points, 2, dtype=torch.float64)
    )
    surf = np.stack([sample.gt_bev_masks.drivable, sample.gt_bev_masks.ped_crossing])
    lines = np.stack([sample.gt_line_masks[cls] for cls in CLASS_ORDER])
    pv = np.stack(sample.gt_pv_masks)[:, None, :, :]
    return TrainingTargets(
        gt_classes=torch.as_tensor(classes, dtype=torch.int64),
        gt_points=gt_points,
        surf_masks=torch.from_numpy(surf.astype(np.float64)),
        line_masks=torch.from_numpy(lines.astype(np.float64)),
        pv_masks=torch.from_numpy(pv.astype(np.float64)),
    )


def total_loss(
    output: ModelOutput,
    targets: TrainingTargets,
    weights: LossWeights,
    arss_enabled: bool = True,
) -> tuple[torch.Tensor, LossReport, MatchResult]:
    """Weighted sum over all task losses.

    Returns the differentiable total, a float report whose total field
    recomputes exactly from its components, and the final-layer match.
    """
    dec = output.decoder
    zero = torch.zeros((), dtype=torch.float64)
    l_pts = zero
    l_cls = zero
    l_dir = zero
    final_match = MatchResult(pairs=[], unmatched_preds=list(range(dec.final_logits.shape[0])))
    n_layers = dec.num_layers
    for layer in range(n_layers):
        logits = dec.class_logits[layer]
        points = dec.points[layer]
        match = match_instances(logits, points, targets.gt_classes, targets.gt_points)
        if layer == n_layers - 1:
            final_match = match
        cls_target = torch.zeros_like(logits)
        for i, g, _ in match.pairs:
            cls_target[i, targets.gt_classes[g]] = 1.0
        l_cls = l_cls + focal_loss(logits, cls_target)
        if match.pairs:
            pts_terms = []
            dir_terms = []
            for i, g, perm in match.pairs:
                gt = targets.gt_points[g]
                if perm == REVERSE:
                    gt = gt.flip(0)
                pts_terms.append((points[i] - gt).abs().sum(dim=-1).mean())
                dir_terms.append(direction_loss(points[i], gt))
            l_pts = l_pts + torch.stack(pts_terms).mean()
            l_dir = l_dir + torch.stack(dir_terms).mean()
    l_pts = l_pts / n_layers
    l_cls = l_cls / n_layers
    l_dir = l_dir / n_layers

    l_bevseg = seg_ce_loss(output.bev_line_logits, targets.line_masks)
    l_pvseg = seg_ce_loss(output.pv_logits, targets.pv_masks)
    if arss_enabled:
        probs = torch.sigmoid(output.arss_logits)
        l_surf = dice_loss(probs[0], targets.surf_masks[0]) + dice_loss(
            probs[1], targets.surf_masks[1]
        )
    else:
        l_surf = zero

    total = (
        weights.pts * l_pts
        + weights.cls * l_cls
        + weights.dir * l_dir
        + weights.bevseg * l_bevseg
        + weights.pvseg * l_pvseg
        + weights.surf * l_surf
    )
    report = LossReport(
        l_pts=float(l_pts.detach()),
        l_cls=float(l_cls.detach()),
        l_dir=float(l_dir.detach()),
        l_bevseg=float(l_bevseg.detach()),
        l_pvseg=float(l_pvseg.detach()),
        l_surf=float(l_surf.detach()),
        total=float(total.detach()),
    )
    return total, report, final_match
