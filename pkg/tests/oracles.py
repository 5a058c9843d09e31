"""Independent straight-loop reference implementations.

Everything here is deliberately written as plain Python loops over scalars,
sharing no code with the package's vectorized paths, so the two can serve as
oracles for each other.
"""

import math

import numpy as np


def dice_loss_loops(pred, target, smooth):
    n, num_classes, h, w = pred.shape
    total = 0.0
    for c in range(num_classes):
        inter = 0.0
        p_sq = 0.0
        g_sq = 0.0
        for i in range(n):
            for y in range(h):
                for x in range(w):
                    p = float(pred[i, c, y, x])
                    g = float(target[i, c, y, x])
                    inter += p * g
                    p_sq += p * p
                    g_sq += g * g
        total += 1.0 - (2.0 * inter + smooth) / (p_sq + g_sq + smooth)
    return total / num_classes


def focal_loss_loops(pred, target, alpha, gamma, prob_clamp):
    n, num_classes, h, w = pred.shape
    total = 0.0
    for i in range(n):
        for c in range(num_classes):
            for y in range(h):
                for x in range(w):
                    p = min(max(float(pred[i, c, y, x]), prob_clamp), 1.0 - prob_clamp)
                    g = float(target[i, c, y, x])
                    total += alpha * (1.0 - p) ** gamma * g * math.log(p)
                    total += (1.0 - alpha) * p ** gamma * (1.0 - g) * math.log(1.0 - p)
    return -total


def conv2d_loops(x, weight, bias, stride, padding):
    n, c_in, h, w = x.shape
    c_out, _, k, _ = weight.shape
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out), dtype=np.float64)
    for i in range(n):
        for o in range(c_out):
            for oy in range(h_out):
                for ox in range(w_out):
                    acc = 0.0 if bias is None else float(bias[o])
                    for c in range(c_in):
                        for ky in range(k):
                            for kx in range(k):
                                iy = oy * stride + ky - padding
                                ix = ox * stride + kx - padding
                                if 0 <= iy < h and 0 <= ix < w:
                                    acc += float(x[i, c, iy, ix]) * float(weight[o, c, ky, kx])
                    out[i, o, oy, ox] = acc
    return out


def confusion_loops(pred, truth):
    """Per-class one-vs-rest counts via per-pixel loops; ties to lowest index."""
    num_classes, h, w = pred.shape

    def argmax_low(vec):
        best = 0
        for c in range(1, len(vec)):
            if vec[c] > vec[best]:
                best = c
        return best

    counts = {c: {"tp": 0, "fp": 0, "fn": 0, "tn": 0} for c in range(num_classes)}
    for y in range(h):
        for x in range(w):
            p = argmax_low([float(pred[c, y, x]) for c in range(num_classes)])
            t = argmax_low([float(truth[c, y, x]) for c in range(num_classes)])
            for c in range(num_classes):
                if p == c and t == c:
                    counts[c]["tp"] += 1
                elif p == c and t != c:
                    counts[c]["fp"] += 1
                elif p != c and t == c:
                    counts[c]["fn"] += 1
                else:
                    counts[c]["tn"] += 1
    return counts
