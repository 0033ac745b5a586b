"""Independent brute-force reference implementations used as test oracles.

Everything here is written with plain Python loops, deliberately sharing no
code with the production package: Sobel edges by explicit convolution,
maximum matching by augmenting-path search (validated below against full
enumeration on tiny inputs), and benchmark scoring by direct accumulation of
the documented protocol.
"""
from __future__ import annotations

import math

import numpy as np

SOBEL_X = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
SOBEL_Y = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]


def ref_sobel_edge(mask) -> np.ndarray:
    """Nonzero Sobel magnitude of a binary mask, reflect border handling."""
    m = np.asarray(mask, dtype=float)
    h, w = m.shape

    def px(r, c):
        # reflect (symmetric) indexing for the 1-pixel border
        return m[_reflect(r, h), _reflect(c, w)]

    out = np.zeros((h, w), dtype=np.uint8)
    for r in range(h):
        for c in range(w):
            gx = gy = 0.0
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    v = px(r + dr, c + dc)
                    gx += SOBEL_X[dr + 1][dc + 1] * v
                    gy += SOBEL_Y[dr + 1][dc + 1] * v
            if math.hypot(gx, gy) > 0:
                out[r, c] = 1
    return out


def _reflect(i: int, n: int) -> int:
    if i < 0:
        return -i - 1
    if i >= n:
        return 2 * n - i - 1
    return i


def ref_guidance(masks: list[np.ndarray]):
    edges = [ref_sobel_edge(m) for m in masks]
    union = np.zeros_like(edges[0])
    freq = np.zeros(edges[0].shape, dtype=float)
    for e in edges:
        union |= e
        freq += e
    return union, freq / len(masks)


# ---------------------------------------------------------------------------
# Matching


def _adjacency(a_pts, b_pts, d_max: float):
    limit = d_max + 1e-12
    adj = []
    for ar, ac in a_pts:
        row = [
            j
            for j, (br, bc) in enumerate(b_pts)
            if math.hypot(ar - br, ac - bc) <= limit
        ]
        adj.append(row)
    return adj


def ref_max_matching(a_pts, b_pts, d_max: float):
    """Maximum bipartite matching via augmenting paths (Kuhn's algorithm).

    Returns (match count, boolean matched flags for the a side).
    """
    adj = _adjacency(a_pts, b_pts, d_max)
    match_b = [-1] * len(b_pts)

    def try_augment(i, visited):
        for j in adj[i]:
            if visited[j]:
                continue
            visited[j] = True
            if match_b[j] == -1 or try_augment(match_b[j], visited):
                match_b[j] = i
                return True
        return False

    count = 0
    for i in range(len(a_pts)):
        if try_augment(i, [False] * len(b_pts)):
            count += 1
    matched_a = np.zeros(len(a_pts), dtype=bool)
    for j, i in enumerate(match_b):
        if i >= 0:
            matched_a[i] = True
    return count, matched_a


def exhaustive_max_matching(a_pts, b_pts, d_max: float) -> int:
    """Exponential enumeration of all one-to-one assignments; tiny inputs only."""
    adj = _adjacency(a_pts, b_pts, d_max)

    def best(i, used):
        if i == len(a_pts):
            return 0
        top = best(i + 1, used)  # leave i unmatched
        for j in adj[i]:
            if not used & (1 << j):
                top = max(top, 1 + best(i + 1, used | (1 << j)))
        return top

    return best(0, 0)


def ref_correspond(pred_bin, gt_list, d_max: float):
    """Returns dict(tp, fp, fn, gt_matched, gt_total) per the protocol note.

    Precision side matches predictions against the union of annotator pixels;
    recall side matches each annotation separately. All counts are maximum
    matching cardinalities, so they are solver-independent.
    """
    pred_pts = [tuple(p) for p in np.argwhere(np.asarray(pred_bin) > 0)]
    union = np.zeros(np.asarray(gt_list[0]).shape, dtype=bool)
    for gt in gt_list:
        union |= np.asarray(gt) > 0
    union_pts = [tuple(p) for p in np.argwhere(union)]
    tp, _ = ref_max_matching(pred_pts, union_pts, d_max)
    gt_matched = 0
    gt_total = 0
    for gt in gt_list:
        gt_pts = [tuple(p) for p in np.argwhere(np.asarray(gt) > 0)]
        gt_total += len(gt_pts)
        count, _ = ref_max_matching(pred_pts, gt_pts, d_max)
        gt_matched += count
    return {
        "tp": tp,
        "fp": len(pred_pts) - tp,
        "fn": gt_total - gt_matched,
        "gt_matched": gt_matched,
        "gt_total": gt_total,
    }


# ---------------------------------------------------------------------------
# Scoring


def ref_prf(tp, fp, gt_matched, gt_total):
    p = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    r = gt_matched / gt_total if gt_total > 0 else 0.0
    f = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
    return p, r, f


def ref_average_precision(recalls, precisions) -> float:
    best = {}
    for r, p in zip(recalls, precisions):
        if r not in best or p > best[r]:
            best[r] = p
    if not best:
        return 0.0
    points = sorted(best.items())
    total = 0.0
    for k in range(1, 101):
        rg = k / 100.0
        if rg < points[0][0] or rg > points[-1][0]:
            continue
        for (r0, p0), (r1, p1) in zip(points, points[1:] + [points[-1]]):
            if r0 <= rg <= r1:
                if r1 == r0:
                    total += p0
                else:
                    total += p0 + (p1 - p0) * (rg - r0) / (r1 - r0)
                break
        else:
            if rg == points[-1][0]:
                total += points[-1][1]
    return total / 100.0


def ref_evaluate(preds, gt_lists, tolerance: float, n_thresholds: int):
    """Full benchmark by direct loops; no thinning (caller pre-thins if needed)."""
    thresholds = [(k + 1) / (n_thresholds + 1) for k in range(n_thresholds)]
    n_images = len(preds)
    counts = [[None] * n_thresholds for _ in range(n_images)]
    for i, (pred, gts) in enumerate(zip(preds, gt_lists)):
        pred = np.asarray(pred, dtype=float)
        d_max = tolerance * math.hypot(*pred.shape)
        for k, t in enumerate(thresholds):
            counts[i][k] = ref_correspond(pred >= t, gts, d_max)

    precision, recall, fscore = [], [], []
    for k in range(n_thresholds):
        tp = sum(counts[i][k]["tp"] for i in range(n_images))
        fp = sum(counts[i][k]["fp"] for i in range(n_images))
        gm = sum(counts[i][k]["gt_matched"] for i in range(n_images))
        gt = sum(counts[i][k]["gt_total"] for i in range(n_images))
        p, r, f = ref_prf(tp, fp, gm, gt)
        precision.append(p)
        recall.append(r)
        fscore.append(f)

    ods_idx = max(range(n_thresholds), key=lambda k: (fscore[k], -k))
    per_image_best = []
    for i in range(n_images):
        fs = [
            ref_prf(
                counts[i][k]["tp"],
                counts[i][k]["fp"],
                counts[i][k]["gt_matched"],
                counts[i][k]["gt_total"],
            )[2]
            for k in range(n_thresholds)
        ]
        per_image_best.append(max(fs))
    return {
        "thresholds": thresholds,
        "precision": precision,
        "recall": recall,
        "f_scores": fscore,
        "ods_f": fscore[ods_idx],
        "ois_f": sum(per_image_best) / n_images,
        "ap": ref_average_precision(recall, precision),
    }
