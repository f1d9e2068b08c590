"""Independent brute-force references the tests compare against.

Everything here is written with plain Python loops and explicit formulas,
on purpose: no code is shared with the package beyond the Box container,
so an indexing or vectorization bug in the package cannot cancel out here.
"""

import numpy as np


def iou_xyxy(a, b):
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def nms_bruteforce(boxes_xyxy, scores, iou_threshold, score_threshold=0.5):
    """Quadratic NMS over corner-form boxes; kept indices, score-descending."""
    candidates = [i for i, s in enumerate(scores) if s >= score_threshold]
    candidates.sort(key=lambda i: (-scores[i], i))
    kept = []
    for i in candidates:
        if all(iou_xyxy(boxes_xyxy[i], boxes_xyxy[j]) <= iou_threshold for j in kept):
            kept.append(i)
    return kept


def bilinear_hat(feature, sy, sx):
    """Interpolate one point as the full hat-weighted sum over all cells."""
    c, h, w = feature.shape
    out = np.zeros(c)
    for i in range(h):
        wy = max(0.0, 1.0 - abs(sy - (i + 0.5)))
        if wy == 0.0:
            continue
        for j in range(w):
            wx = max(0.0, 1.0 - abs(sx - (j + 0.5)))
            if wx > 0.0:
                out += feature[:, i, j] * wy * wx
    return out


def roi_align_dense(feature, stride, box_xyxy, resolution, aggregation="max"):
    """Dense-sum ROI Align: 4 quarter-point samples per bin, max or mean."""
    x1, y1, x2, y2 = (v / stride for v in box_xyxy)
    bw = (x2 - x1) / resolution
    bh = (y2 - y1) / resolution
    c = feature.shape[0]
    out = np.zeros((c, resolution, resolution))
    for by in range(resolution):
        for bx in range(resolution):
            samples = []
            for dy, dx in ((0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)):
                sy = y1 + (by + dy) * bh
                sx = x1 + (bx + dx) * bw
                samples.append(bilinear_hat(feature, sy, sx))
            stacked = np.stack(samples)
            if aggregation == "max":
                # per-channel max over the four samples
                out[:, by, bx] = stacked.max(axis=0)
            else:
                out[:, by, bx] = stacked.mean(axis=0)
    return out


def match_reference(dets, gts, thr):
    """Greedy matcher for one (image, class) group.

    dets: list of (score, box_xyxy); gts: list of (box_xyxy, iscrowd).
    Returns per-detection flags in score-descending order: 1 TP, 0 FP,
    -1 ignored by a crowd region.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], i))
    real = [g for g in gts if not g[1]]
    crowd = [g for g in gts if g[1]]
    used = [False] * len(real)
    flags = []
    for di in order:
        box = dets[di][1]
        best, pick = 0.0, -1
        for gi, (gbox, _) in enumerate(real):
            if used[gi]:
                continue
            ov = iou_xyxy(box, gbox)
            if ov > best:
                best, pick = ov, gi
        if pick >= 0 and best >= thr:
            used[pick] = True
            flags.append(1)
        elif any(iou_xyxy(box, cbox) >= thr for cbox, _ in crowd):
            flags.append(-1)
        else:
            flags.append(0)
    return flags, len(real)


def ap_reference(flags, n_gt):
    """101-point interpolated AP from score-sorted flags, loops only."""
    kept = [f for f in flags if f != -1]
    if n_gt <= 0:
        return 0.0
    precision, recall = [], []
    tp = fp = 0
    for f in kept:
        if f == 1:
            tp += 1
        else:
            fp += 1
        precision.append(tp / (tp + fp))
        recall.append(tp / n_gt)
    # envelope: best precision at any recall >= r
    ap_sum = 0.0
    for k in range(101):
        r = k / 100.0
        best = 0.0
        for p, rc in zip(precision, recall):
            if rc >= r and p > best:
                best = p
        ap_sum += best
    return ap_sum / 101.0


def map_reference(dets, gts, thr):
    """mAP at one threshold over classes with >= 1 non-crowd ground truth.

    dets: list of (image_id, class_id, score, box_xyxy);
    gts: list of (image_id, class_id, box_xyxy, iscrowd).
    """
    class_gt = {}
    for img, cid, box, iscrowd in gts:
        if not iscrowd:
            class_gt[cid] = class_gt.get(cid, 0) + 1
    classes = sorted(c for c, n in class_gt.items() if n > 0)
    if not classes:
        return 0.0
    aps = []
    for cid in classes:
        entries = []  # (score, insertion_rank, flag) across all images
        rank = 0
        images = sorted({d[0] for d in dets} | {g[0] for g in gts})
        for img in images:
            d_grp = [(s, b) for i, c, s, b in dets if i == img and c == cid]
            g_grp = [(b, cr) for i, c, b, cr in gts if i == img and c == cid]
            flags, _ = match_reference(d_grp, g_grp, thr)
            scores = sorted((d[0] for d in d_grp), reverse=True)
            for s, f in zip(scores, flags):
                entries.append((s, rank, f))
                rank += 1
        entries.sort(key=lambda e: (-e[0], e[1]))
        aps.append(ap_reference([e[2] for e in entries], class_gt[cid]))
    return sum(aps) / len(aps)
