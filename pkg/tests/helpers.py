"""Independent oracles shared by the test modules."""
from __future__ import annotations

import math

import numpy as np

from deskdet import autodiff as ad

POS, NEG, IGN = 1, 0, -1


def numeric_grad(f, arrays, h=1e-3):
    """Central finite differences of scalar f(list of float64 arrays)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f(arrays)
            a[i] = old - h
            fm = f(arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-3):
    """max |a-n| / max(|a|, |n|, floor) over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst


def gradcheck(build, arrays, h=1e-3):
    """Compare autodiff gradients of ``build(*tensors)`` with finite differences in 64-bit."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with ad.precision(np.float64):
        ts = [ad.parameter(a) for a in arrays]
        out = build(*ts)
        out.backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

        def f(arrs):
            return float(build(*[ad.Tensor(a) for a in arrs]).item())

        numeric = numeric_grad(f, arrays, h)
    return max_rel_error(analytic, numeric)


def jitter_biases(params, rng):
    # zero biases put pre-activations exactly on the relu kink wherever the input window is zero
    for p in params:
        p.data = p.data.astype(np.float64)
        if p.name.endswith("bias"):
            p.data = p.data + rng.normal(0, 0.1, p.shape)


def param_gradcheck(params, loss_fn, rng, samples=6, h=1e-6):
    """Analytic vs central differences on a random subset of entries of each parameter."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params:
        assert p.grad is not None, p.name
        idx = [tuple(rng.integers(0, s) for s in p.shape) for _ in range(samples)]
        num, ana = [], []
        for i in idx:
            old = p.data[i]
            p.data[i] = old + h
            fp = loss_fn().item()
            p.data[i] = old - h
            fm = loss_fn().item()
            p.data[i] = old
            num.append((fp - fm) / (2 * h))
            ana.append(p.grad[i])
        worst = max(worst, max_rel_error([np.array(ana)], [np.array(num)]))
    return worst


def conv2d_loops(x, w, b=None, stride=1, padding=0):
    """Six nested loops, no vectorisation."""
    sh, sw = (stride, stride) if np.isscalar(stride) else stride
    ph, pw = (padding, padding) if np.isscalar(padding) else padding
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, k, ho, wo))
    for ni in range(n):
        for ki in range(k):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0 if b is None else float(b[ki])
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                s += xp[ni, ci, i * sh + u, j * sw + v] * w[ki, ci, u, v]
                    out[ni, ki, i, j] = s
    return out


def bilinear_oracle(feature, x, y):
    """Weighted sum of the four surrounding nodes; absent nodes count as zero."""
    c, h, w = feature.shape
    x0, y0 = math.floor(x), math.floor(y)
    out = np.zeros(c)
    for yy, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
        for xx, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
            if 0 <= yy < h and 0 <= xx < w:
                out += wy * wx * feature[:, yy, xx]
    return out


def iou_oracle(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms_oracle(boxes, scores, overlap):
    """O(n^2): a box survives iff no higher-ranked survivor overlaps it beyond the threshold."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(iou_oracle(boxes[i], boxes[j]) <= overlap for j in kept):
            kept.append(i)
    return kept


def random_boxes(rng, n, lo=0.0, hi=100.0, min_side=1.0, max_side=40.0):
    x1 = rng.uniform(lo, hi, n)
    y1 = rng.uniform(lo, hi, n)
    w = rng.uniform(min_side, max_side, n)
    h = rng.uniform(min_side, max_side, n)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


def roi_align_oracle(feature, roi, size):
    """One bilinear sample at the centre of each of size x size bins; feature is [C,H,W]."""
    x1, y1, x2, y2 = roi
    out = np.zeros((feature.shape[0], size, size))
    for i in range(size):
        for j in range(size):
            x = x1 + (j + 0.5) * (x2 - x1) / size
            y = y1 + (i + 0.5) * (y2 - y1) / size
            out[:, i, j] = bilinear_oracle(feature, x, y)
    return out


def anchor_match_oracle(anchors, gts, neg, pos):
    """Per-anchor threshold labels, then each gt force-claims its best anchor."""
    labels, owner = [], []
    for a in anchors:
        ov = [iou_oracle(a, g) for g in gts]
        best = max(ov, default=0.0)
        labels.append(POS if best >= pos else NEG if best < neg else IGN)
        owner.append(int(np.argmax(ov)) if labels[-1] == POS else -1)
    # forced claims: each gt takes its best anchor; contested anchors go to the larger overlap
    claim = {}
    for g_idx, g in enumerate(gts):
        ov = [iou_oracle(a, g) for a in anchors]
        k = int(np.argmax(ov))
        if ov[k] > 0 and ov[k] > claim.get(k, (-1.0, None))[0]:
            claim[k] = (ov[k], g_idx)
    for k, (_, g_idx) in claim.items():
        labels[k], owner[k] = POS, g_idx
    return np.array(labels), np.array(owner)


def det_match_oracle(dets, gts, thr):
    """Plain loops: TP flags in global descending-score order (ties by image, index)."""
    flat = [(float(d[4]), i, j) for i, ds in enumerate(dets) for j, d in enumerate(ds)]
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    used = [set() for _ in gts]
    flags = []
    for _, i, j in flat:
        best, best_ov = None, -1.0
        for g_idx, g in enumerate(gts[i]):
            if g_idx in used[i]:
                continue
            ov = iou_oracle(dets[i][j][:4], g)
            if ov >= thr and ov > best_ov:
                best, best_ov = g_idx, ov
        if best is not None:
            used[i].add(best)
        flags.append(best is not None)
    return flags


def ap_oracle(flags, num_gt):
    """Sum over recall steps of the best precision achieved at that recall or beyond."""
    if num_gt == 0:
        return 0.0
    precisions, tp = [], 0
    for k, f in enumerate(flags, 1):
        tp += f
        precisions.append(tp / k)
    total = 0.0
    for k, f in enumerate(flags):
        if f:
            total += max(precisions[k:]) / num_gt
    return total


def fp_prefix_oracle(flags, num_gt, level):
    need = math.ceil(level * num_gt - 1e-9)
    if num_gt == 0:
        return None
    if need == 0:
        return 0
    tp = fp = 0
    for f in flags:
        tp += f
        fp += not f
        if tp >= need:
            return fp
    return None


def random_eval_case(rng, images=None):
    images = images or int(rng.integers(1, 4))
    gts = [random_boxes(rng, int(rng.integers(0, 5)), hi=60, min_side=5, max_side=30) for _ in range(images)]
    dets = []
    for g in gts:
        jitter = [b + rng.normal(0, 3, 4) for b in g if rng.uniform() < 0.8]
        extra = list(random_boxes(rng, int(rng.integers(0, 5)), hi=60, min_side=5, max_side=30))
        boxes = [np.array([min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]), max(b[1], b[3])]) for b in jitter + extra]
        scores = np.round(rng.uniform(size=len(boxes)), 2)   # coarse scores exercise tie-breaks
        dets.append(np.array([[*b, s] for b, s in zip(boxes, scores)]).reshape(-1, 5))
    return dets, gts
