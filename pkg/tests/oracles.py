"""Direct loop implementations used as independent references in the tests."""

import math

import numpy as np


def conv2d_loop(x, weight, bias, padding="zeros"):
    c_out, c_in, k, _ = weight.shape
    _, h, w = x.shape
    pad = k // 2
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for y in range(h):
            for xx in range(w):
                total = bias[o]
                for i in range(c_in):
                    for dy in range(k):
                        for dx in range(k):
                            sy, sx = y + dy - pad, xx + dx - pad
                            if padding == "edge":
                                sy, sx = min(max(sy, 0), h - 1), min(max(sx, 0), w - 1)
                            elif not (0 <= sy < h and 0 <= sx < w):
                                continue
                            total += weight[o, i, dy, dx] * x[i, sy, sx]
                out[o, y, xx] = total
    return out


def adaptive_pool_loop(x, out_h, out_w):
    c, h, w = x.shape
    out = np.zeros((c, out_h, out_w))
    for i in range(out_h):
        top, bottom = (i * h) // out_h, math.ceil((i + 1) * h / out_h)
        for j in range(out_w):
            left, right = (j * w) // out_w, math.ceil((j + 1) * w / out_w)
            for ch in range(c):
                out[ch, i, j] = x[ch, top:bottom, left:right].mean()
    return out


def bilinear_loop(x, out_h, out_w):
    c, h, w = x.shape

    def source(i, size, out):
        return i * (size - 1) / (out - 1) if out > 1 else (size - 1) / 2

    out = np.zeros((c, out_h, out_w))
    for i in range(out_h):
        sy = source(i, h, out_h)
        y0 = min(int(math.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = source(j, w, out_w)
            x0 = min(int(math.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            for ch in range(c):
                top = x[ch, y0, x0] * (1 - fx) + x[ch, y0, x1] * fx
                bottom = x[ch, y1, x0] * (1 - fx) + x[ch, y1, x1] * fx
                out[ch, i, j] = top * (1 - fy) + bottom * fy
    return out


def cross_entropy_loop(logits, target):
    _, h, w = logits.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            a, b = logits[0, y, x], logits[1, y, x]
            m = max(a, b)
            log_norm = m + math.log(math.exp(a - m) + math.exp(b - m))
            total += log_norm - logits[int(target[y, x]), y, x]
    return total / (h * w)


def masked_average_loop(features, mask):
    c, h, w = features.shape
    total = np.zeros(c)
    count = 0
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                total += features[:, y, x]
                count += 1
    return total / count


def align_mask_loop(query, support, mask):
    """Brute force over every query/support position pair."""
    c, h, w = query.shape
    _, hs, ws = support.shape
    raw = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            q = query[:, y, x]
            best = -np.inf
            for sy in range(hs):
                for sx in range(ws):
                    s = support[:, sy, sx] * mask[sy, sx]
                    qn, sn = np.linalg.norm(q), np.linalg.norm(s)
                    cosine = 0.0 if qn == 0 or sn == 0 else float(q @ s) / (qn * sn)
                    best = max(best, cosine)
            raw[y, x] = best
    low, high = raw.min(), raw.max()
    if high - low <= 1e-12:
        return np.full((h, w), 0.5)
    return (raw - low) / (high - low)


def iou_loop(pred, truth):
    inter = union = 0
    for p, t in zip(np.ravel(pred), np.ravel(truth)):
        inter += int(p == 1 and t == 1)
        union += int(p == 1 or t == 1)
    return inter, union
