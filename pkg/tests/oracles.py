"""Independent brute-force reference implementations.

Everything here is deliberately slow and written from first principles,
separate from the library code paths it checks: rasterized IoU, quadratic
NMS, per-cell loops, Monte-Carlo pooling, and a naive metrics evaluator.
"""

from __future__ import annotations

import math

import numpy as np


def iou_rasterized(a, b, resolution: int = 400) -> float:
    """IoU estimated by rasterizing both boxes onto a fine pixel grid."""
    x_lo = min(a.x, b.x)
    y_lo = min(a.y, b.y)
    x_hi = max(a.x + a.w, b.x + b.w)
    y_hi = max(a.y + a.h, b.y + b.h)
    xs = np.linspace(x_lo, x_hi, resolution, endpoint=False) + (x_hi - x_lo) / (
        2 * resolution
    )
    ys = np.linspace(y_lo, y_hi, resolution, endpoint=False) + (y_hi - y_lo) / (
        2 * resolution
    )
    gx, gy = np.meshgrid(xs, ys)

    def inside(box):
        return (gx >= box.x) & (gx < box.x + box.w) & (gy >= box.y) & (gy < box.y + box.h)

    mask_a = inside(a)
    mask_b = inside(b)
    union = (mask_a | mask_b).sum()
    if union == 0:
        return 0.0
    return (mask_a & mask_b).sum() / union


def nms_quadratic(boxes, iou_threshold, iou_fn) -> list:
    """O(n^2) greedy NMS written directly from the definition."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept: list[int] = []
    for i in order:
        if all(iou_fn(boxes[i].box, boxes[j].box) <= iou_threshold for j in kept):
            kept.append(i)
    return [boxes[i] for i in kept]


def reconstruct_cells_loops(enc_w, enc_b, dec_w, dec_b, cells) -> np.ndarray:
    """Per-cell, per-output-coordinate reconstruction with explicit loops."""
    n, c = cells.shape
    latent_dim = enc_w.shape[0]
    out = np.zeros_like(cells)
    for idx in range(n):
        latent = np.zeros(latent_dim)
        for l in range(latent_dim):
            latent[l] = enc_b[l] + sum(enc_w[l, k] * cells[idx, k] for k in range(c))
        for k in range(c):
            out[idx, k] = dec_b[k] + sum(dec_w[k, l] * latent[l] for l in range(latent_dim))
    return out


def mean_l2_loss_loops(rec, cells) -> float:
    total = 0.0
    for i in range(cells.shape[0]):
        total += math.sqrt(float(np.sum((rec[i] - cells[i]) ** 2)))
    return total / cells.shape[0]


def finite_difference_gradients(loss_fn, arrays, step: float = 1e-4) -> list:
    """Central finite differences of a scalar function of several arrays."""
    grads = []
    for arr in arrays:
        grad = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            hi = loss_fn()
            flat[k] = orig - step
            lo = loss_fn()
            flat[k] = orig
            gflat[k] = (hi - lo) / (2 * step)
        grads.append(grad)
    return grads


def monte_carlo_pooled_error(data, box, stride, n_samples: int = 10_000, seed: int = 0):
    """Mean of the bilinear interpolant over the box, by dense sampling.

    Uses numpy's own generator (independent of the package PRNG) and a
    straight-line re-derivation of clamped bilinear interpolation.
    """
    rng = np.random.default_rng(seed)
    h, w = data.shape
    xs = box.x + rng.random(n_samples) * box.w
    ys = box.y + rng.random(n_samples) * box.h
    total = 0.0
    for px, py in zip(xs, ys):
        gx = px / stride - 0.5
        gy = py / stride - 0.5
        gx = min(max(gx, 0.0), w - 1.0)
        gy = min(max(gy, 0.0), h - 1.0)
        j0 = min(int(math.floor(gx)), w - 2) if w > 1 else 0
        i0 = min(int(math.floor(gy)), h - 2) if h > 1 else 0
        fx = gx - j0
        fy = gy - i0
        j1 = min(j0 + 1, w - 1)
        i1 = min(i0 + 1, h - 1)
        val = (
            data[i0, j0] * (1 - fx) * (1 - fy)
            + data[i0, j1] * fx * (1 - fy)
            + data[i1, j0] * (1 - fx) * fy
            + data[i1, j1] * fx * fy
        )
        total += val
    return total / n_samples


def cell_membership_loops(boxes, h, w, stride) -> np.ndarray:
    """Per-cell point-in-box test with explicit loops (half-open edges)."""
    mask = np.zeros((h, w), dtype=bool)
    for i in range(h):
        cy = (i + 0.5) * stride
        for j in range(w):
            cx = (j + 0.5) * stride
            for b in boxes:
                if b.x <= cx < b.x + b.w and b.y <= cy < b.y + b.h:
                    mask[i, j] = True
                    break
    return mask


def best_iou_targets_loops(proposals, gts, positive_iou, iou_fn) -> list:
    out = []
    for p in proposals:
        best = 0.0
        for g in gts:
            best = max(best, iou_fn(p, g))
        out.append(best if best > positive_iou else None)
    return out


def mann_whitney_auc(positives, negatives) -> float:
    """P(positive > negative) + 0.5 P(tie) by full pairwise comparison."""
    pos = np.asarray(positives)[:, None]
    neg = np.asarray(negatives)[None, :]
    wins = (pos > neg).sum() + 0.5 * (pos == neg).sum()
    return float(wins / (pos.size * neg.size))


# Naive metrics evaluator -----------------------------------------------------


def naive_greedy_match(dets, gts, iou_fn, iou_thresh):
    """Score-ordered greedy matching, one GT per detection, per image."""
    taken = set()
    matches = {}
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    for d_idx in order:
        det = dets[d_idx]
        best_g, best_iou = None, 0.0
        for g_idx, gt in enumerate(gts):
            if gt.image_id != det.image_id or g_idx in taken:
                continue
            v = iou_fn(det.box, gt.box)
            if v > best_iou:
                best_g, best_iou = g_idx, v
        if best_g is not None and best_iou >= iou_thresh:
            taken.add(best_g)
            matches[d_idx] = best_g
    return matches


def naive_average_precision(dets, gts, iou_fn, iou_thresh=0.5) -> float:
    """AP by enumerating every prefix of the ranked detection list.

    For each cut-off k, precision and recall of the top-k list are computed
    from scratch; the all-point-interpolated area is then the sum over
    recall increments of the best precision at or beyond that recall.
    """
    if not gts or not dets:
        return 0.0
    matches = naive_greedy_match(dets, gts, iou_fn, iou_thresh)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    points = []
    for k in range(1, len(order) + 1):
        prefix = order[:k]
        tp = sum(1 for d in prefix if d in matches)
        points.append((tp / len(gts), tp / k))
    ap = 0.0
    prev_recall = 0.0
    for recall, _ in sorted(set(points)):
        if recall <= prev_recall:
            continue
        best_prec = max(p for r, p in points if r >= recall)
        ap += (recall - prev_recall) * best_prec
        prev_recall = recall
    return ap


def naive_u_recall(dets, gts, iou_fn, score_thresh=0.05, iou_thresh=0.5) -> float:
    unknown_gts = [g for g in gts if g.is_unknown]
    if not unknown_gts:
        return 0.0
    cand = [d for d in dets if d.class_label == "unknown" and d.score > score_thresh]
    matches = naive_greedy_match(cand, unknown_gts, iou_fn, iou_thresh)
    return len(matches) / len(unknown_gts)


def naive_recall_at_k(dets, gts, k, iou_fn, iou_thresh=0.5) -> float:
    unknown_gts = [g for g in gts if g.is_unknown]
    if not unknown_gts:
        return 0.0
    kept = []
    for image_id in sorted({d.image_id for d in dets}):
        image_dets = [
            d for d in dets if d.image_id == image_id and d.class_label == "unknown"
        ]
        image_dets.sort(key=lambda d: -d.score)
        kept.extend(image_dets[:k])
    matches = naive_greedy_match(kept, unknown_gts, iou_fn, iou_thresh)
    return len(matches) / len(unknown_gts)


def naive_a_ose(dets, gts, iou_fn, iou_thresh=0.5) -> int:
    known_dets = [d for d in dets if d.class_label != "unknown"]
    known_dets.sort(key=lambda d: -d.score)
    counted = set()
    total = 0
    for det in known_dets:
        best_g, best_iou = None, 0.0
        for g_idx, gt in enumerate(gts):
            if gt.image_id != det.image_id:
                continue
            v = iou_fn(det.box, gt.box)
            if v > best_iou:
                best_g, best_iou = g_idx, v
        if best_g is None or best_iou < iou_thresh:
            continue
        if gts[best_g].is_unknown and best_g not in counted:
            counted.add(best_g)
            total += 1
    return total
