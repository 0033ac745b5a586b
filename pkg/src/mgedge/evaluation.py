"""Boundary benchmark engine: orientation-aware thinning, tolerance-based
pixel correspondence, and ODS / OIS / AP scoring.

Protocol conventions (see docs/protocol.md):

* Matching is exact maximum-cardinality bipartite matching between predicted
  and ground-truth edge pixels within a Euclidean distance budget.
* Precision matches predictions against the union of annotator edge pixels
  (a predicted pixel matching any annotator counts once); recall matches
  each annotation separately and aggregates the per-annotation tallies.
* ODS maximizes the pooled dataset F over thresholds; OIS averages each
  image's best F; AP integrates precision over a fixed 100-point recall grid.

Accumulation is a commutative integer reduction, so reports are identical
regardless of how work is partitioned across workers.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.spatial import cKDTree

from .errors import ConfigError, InputError
from .granularity import AnnotationSet

RECALL_GRID = np.arange(1, 101) / 100.0


@dataclass
class EvalConfig:
    tolerance: float = 0.0075  # fraction of the image diagonal
    thresholds: int = 99
    apply_nms: bool = True

    def __post_init__(self):
        if not 0.0 < self.tolerance < 0.1:
            raise ConfigError(f"tolerance must lie in (0, 0.1), got {self.tolerance}")
        if self.thresholds < 1:
            raise ConfigError("threshold count must be >= 1")

    def threshold_values(self) -> np.ndarray:
        k = self.thresholds
        return np.arange(1, k + 1) / (k + 1)

    def distance_budget(self, shape: tuple[int, int]) -> float:
        h, w = shape
        return self.tolerance * float(np.hypot(h, w))


@dataclass
class CorrespondCounts:
    """Pixel correspondence tallies for one prediction against one annotation set.

    ``tp``/``fp`` partition the predicted pixels (precision side);
    ``gt_matched``/``fn`` partition the per-annotation ground-truth pixels
    (recall side), aggregated over annotators.
    """

    tp: int
    fp: int
    fn: int
    gt_matched: int
    gt_total: int

    def as_array(self) -> np.ndarray:
        return np.array([self.tp, self.fp, self.gt_matched, self.gt_total], dtype=np.int64)


@dataclass
class EvalReport:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f_scores: np.ndarray
    ods_f: float
    ods_threshold: float
    ois_f: float
    ap: float
    per_image_best_thresholds: np.ndarray
    per_image_selection: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {
            "thresholds": self.thresholds.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f_scores": self.f_scores.tolist(),
            "ods_f": self.ods_f,
            "ods_threshold": self.ods_threshold,
            "ois_f": self.ois_f,
            "ap": self.ap,
            "per_image_best_thresholds": self.per_image_best_thresholds.tolist(),
        }
        if self.per_image_selection is not None:
            out["per_image_selection"] = self.per_image_selection.tolist()
        return out

    def save_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def save_pr_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "precision", "recall", "f"])
            for row in zip(self.thresholds, self.precision, self.recall, self.f_scores):
                writer.writerow([f"{v:.10g}" for v in row])


# ---------------------------------------------------------------------------
# Thinning


def nms_thin(prob: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Suppress pixels that are not maximal along the local edge normal.

    The normal is the principal direction of the Gaussian-smoothed structure
    tensor (gradient-energy orientation), which stays well defined on ridge
    crests where the raw gradient vanishes. Surviving values are unchanged;
    ties survive.
    """
    p = np.asarray(prob, dtype=np.float64)
    ix = ndimage.gaussian_filter(p, sigma, order=(0, 1))
    iy = ndimage.gaussian_filter(p, sigma, order=(1, 0))
    jxx = ndimage.gaussian_filter(ix * ix, sigma)
    jxy = ndimage.gaussian_filter(ix * iy, sigma)
    jyy = ndimage.gaussian_filter(iy * iy, sigma)
    phi = 0.5 * np.arctan2(2.0 * jxy, jxx - jyy)
    ux, uy = np.cos(phi), np.sin(phi)

    rows, cols = np.indices(p.shape)
    # border samples clamp to the edge pixel (nearest), so a ridge touching
    # the border is compared against itself rather than an artificial zero
    ahead = ndimage.map_coordinates(p, [rows + uy, cols + ux], order=1, mode="nearest")
    behind = ndimage.map_coordinates(p, [rows - uy, cols - ux], order=1, mode="nearest")
    keep = (p >= ahead) & (p >= behind)
    return np.where(keep, p, 0.0)


# ---------------------------------------------------------------------------
# Correspondence


def _match_count(pred_pts: np.ndarray, gt_pts: np.ndarray, d_max: float):
    """Maximum one-to-one matching within distance; returns (count, matched pred mask)."""
    n_pred, n_gt = len(pred_pts), len(gt_pts)
    matched_pred = np.zeros(n_pred, dtype=bool)
    if n_pred == 0 or n_gt == 0:
        return 0, matched_pred
    tree = cKDTree(gt_pts)
    neighbors = tree.query_ball_point(pred_pts, r=d_max + 1e-12)
    rows, cols = [], []
    for i, js in enumerate(neighbors):
        rows.extend([i] * len(js))
        cols.extend(js)
    if not rows:
        return 0, matched_pred
    graph = csr_matrix(
        (np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n_pred, n_gt)
    )
    assignment = maximum_bipartite_matching(graph, perm_type="column")
    matched_pred = assignment >= 0
    return int(matched_pred.sum()), matched_pred


def _edge_points(grid: np.ndarray) -> np.ndarray:
    return np.argwhere(np.asarray(grid) > 0).astype(np.float64)


def correspond(
    pred_bin: np.ndarray, gt_list: list[np.ndarray], d_max: float
) -> CorrespondCounts:
    """Tolerance-based one-to-one pixel correspondence.

    Precision side: predictions are matched against the deduplicated union of
    all annotators' edge pixels, so a predicted pixel matching any annotation
    counts exactly once. Recall side: each annotation is matched separately
    and unmatched ground-truth pixels aggregate into the false negatives.
    Every count is a maximum-matching cardinality, hence unique: any exact
    matcher reproduces these numbers bit for bit.
    """
    if d_max < 0:
        raise InputError("distance budget must be >= 0")
    pred_pts = _edge_points(pred_bin)
    union = np.zeros(np.asarray(gt_list[0]).shape, dtype=bool)
    for gt in gt_list:
        union |= np.asarray(gt) > 0
    tp, _ = _match_count(pred_pts, _edge_points(union), d_max)
    gt_matched = 0
    gt_total = 0
    for gt in gt_list:
        gt_pts = _edge_points(gt)
        gt_total += len(gt_pts)
        count, _ = _match_count(pred_pts, gt_pts, d_max)
        gt_matched += count
    return CorrespondCounts(
        tp=tp,
        fp=len(pred_pts) - tp,
        fn=gt_total - gt_matched,
        gt_matched=gt_matched,
        gt_total=gt_total,
    )


# ---------------------------------------------------------------------------
# Scoring


def _prf(tp: float, fp: float, gt_matched: float, gt_total: float) -> tuple[float, float, float]:
    pred_total = tp + fp
    precision = tp / pred_total if pred_total > 0 else 0.0
    recall = gt_matched / gt_total if gt_total > 0 else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f


def _curve(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(K, 4) count rows -> precision/recall/F arrays."""
    out = np.array([_prf(*row) for row in counts], dtype=np.float64)
    return out[:, 0], out[:, 1], out[:, 2]


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Mean of precision linearly interpolated on the fixed recall grid.

    Duplicate recall values collapse to their best precision; grid points
    outside the observed recall range contribute zero.
    """
    by_recall: dict[float, float] = {}
    for r, p in zip(recall, precision):
        by_recall[r] = max(p, by_recall.get(r, 0.0))
    if not by_recall:
        return 0.0
    rs = np.array(sorted(by_recall))
    ps = np.array([by_recall[r] for r in rs])
    interp = np.interp(RECALL_GRID, rs, ps, left=0.0, right=0.0)
    interp[RECALL_GRID < rs[0]] = 0.0
    interp[RECALL_GRID > rs[-1]] = 0.0
    return float(interp.mean())


def _image_threshold_counts(
    prob: np.ndarray, ann: AnnotationSet, cfg: EvalConfig
) -> np.ndarray:
    """(K, 4) integer counts (tp, fp, gt_matched, gt_total) for one image."""
    p = nms_thin(prob) if cfg.apply_nms else np.asarray(prob, dtype=np.float64)
    d_max = cfg.distance_budget(p.shape)
    rows = []
    for t in cfg.threshold_values():
        counts = correspond(p >= t, ann.labels, d_max)
        rows.append(counts.as_array())
    return np.stack(rows)


def _report_from_counts(
    per_image: np.ndarray, cfg: EvalConfig, selection: np.ndarray | None = None
) -> EvalReport:
    """per_image: (n_images, K, 4) counts."""
    thresholds = cfg.threshold_values()
    pooled = per_image.sum(axis=0)
    precision, recall, f_scores = _curve(pooled)
    ods_idx = int(np.argmax(f_scores))

    image_best_f = []
    image_best_t = []
    for counts in per_image:
        _, _, fs = _curve(counts)
        best = int(np.argmax(fs))
        image_best_f.append(fs[best])
        image_best_t.append(thresholds[best])
    ois_f = float(np.mean(image_best_f))

    return EvalReport(
        thresholds=thresholds,
        precision=precision,
        recall=recall,
        f_scores=f_scores,
        ods_f=float(f_scores[ods_idx]),
        ods_threshold=float(thresholds[ods_idx]),
        ois_f=ois_f,
        ap=average_precision(recall, precision),
        per_image_best_thresholds=np.array(image_best_t),
        per_image_selection=selection,
    )


def evaluate(
    preds: list[np.ndarray], gts: list[AnnotationSet], cfg: EvalConfig
) -> EvalReport:
    """Dataset-level benchmark of probability maps against annotation sets."""
    if len(preds) == 0:
        raise InputError("empty dataset")
    if len(preds) != len(gts):
        raise InputError(f"got {len(preds)} predictions for {len(gts)} annotation sets")
    per_image = np.stack(
        [_image_threshold_counts(p, ann, cfg) for p, ann in zip(preds, gts)]
    )
    return _report_from_counts(per_image, cfg)


def best_match_evaluate(
    candidate_sets: list[list[np.ndarray]], gts: list[AnnotationSet], cfg: EvalConfig
) -> EvalReport:
    """Benchmark with per-image candidate selection.

    At each threshold the candidate with the highest per-image F is selected
    (ties go to the lowest index) and its counts enter the pooled curve; the
    per-image best F used for OIS is likewise the best across candidates.
    """
    if len(candidate_sets) == 0:
        raise InputError("empty dataset")
    if len(candidate_sets) != len(gts):
        raise InputError("candidate sets and annotation sets are misaligned")
    if any(len(cands) == 0 for cands in candidate_sets):
        raise InputError("each image needs at least one candidate")

    k = cfg.thresholds
    chosen_counts = []
    selections = []
    for cands, ann in zip(candidate_sets, gts):
        stacks = np.stack([_image_threshold_counts(c, ann, cfg) for c in cands])
        f_by_cand = np.stack([_curve(stack)[2] for stack in stacks])  # (M, K)
        pick = np.argmax(f_by_cand, axis=0)  # first max wins ties
        chosen_counts.append(stacks[pick, np.arange(k)])
        selections.append(pick)
    per_image = np.stack(chosen_counts)
    return _report_from_counts(per_image, cfg, selection=np.stack(selections))
