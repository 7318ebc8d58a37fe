"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (nested loops, per-sample counting,
straight-line equation transcription) and shares no code with the package
paths it checks.
"""

import math

import numpy as np


def relu_np(x):
    return np.maximum(x, 0.0)


def sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-x))


def conv2d_naive(x, kernel, bias, stride=(1, 1), padding="same"):
    """Six-nested-loop cross-correlation, zero padding."""
    n, h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    sh, sw = stride
    if padding == "same":
        ho = -(-h // sh)
        wo = -(-w // sw)
        pt = max(0, (ho - 1) * sh + kh - h) // 2
        pl = max(0, (wo - 1) * sw + kw - w) // 2
    else:
        ho = (h - kh) // sh + 1
        wo = (w - kw) // sw + 1
        pt = pl = 0
    out = np.zeros((n, ho, wo, cout), dtype=np.float64)
    for b in range(n):
        for oi in range(ho):
            for oj in range(wo):
                for oc in range(cout):
                    acc = 0.0
                    for ki in range(kh):
                        for kj in range(kw):
                            ii = oi * sh + ki - pt
                            jj = oj * sw + kj - pl
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += float(np.dot(x[b, ii, jj, :], kernel[ki, kj, :, oc]))
                    out[b, oi, oj, oc] = acc + (bias[oc] if bias is not None else 0.0)
    return out


def avgpool_naive(x, pool, stride=None, ceil_mode=False):
    """Windowed mean; partial windows average only existing cells."""
    ph, pw = pool
    sh, sw = stride if stride is not None else (ph, pw)
    n, h, w, c = x.shape

    def count(size, k, s):
        steps = math.ceil((size - k) / s) if ceil_mode else math.floor((size - k) / s)
        steps = max(steps, 0)
        while steps > 0 and steps * s >= size:
            steps -= 1
        return steps + 1

    ho, wo = count(h, ph, sh), count(w, pw, sw)
    out = np.zeros((n, ho, wo, c), dtype=np.float64)
    for b in range(n):
        for oi in range(ho):
            for oj in range(wo):
                r0, r1 = oi * sh, min(oi * sh + ph, h)
                c0, c1 = oj * sw, min(oj * sw + pw, w)
                for ch in range(c):
                    vals = [x[b, i, j, ch] for i in range(r0, r1) for j in range(c0, c1)]
                    out[b, oi, oj, ch] = sum(vals) / len(vals)
    return out


def upsample_naive(x, target):
    """Per-pixel half-pixel-center bilinear interpolation."""
    n, h, w, c = x.shape
    th, tw = target
    out = np.zeros((n, th, tw, c), dtype=np.float64)
    for oi in range(th):
        src_y = min(max((oi + 0.5) * h / th - 0.5, 0.0), h - 1.0)
        y0 = int(math.floor(src_y))
        y1 = min(y0 + 1, h - 1)
        ty = src_y - y0
        for oj in range(tw):
            src_x = min(max((oj + 0.5) * w / tw - 0.5, 0.0), w - 1.0)
            x0 = int(math.floor(src_x))
            x1 = min(x0 + 1, w - 1)
            tx = src_x - x0
            out[:, oi, oj, :] = (
                (1 - ty) * (1 - tx) * x[:, y0, x0, :]
                + (1 - ty) * tx * x[:, y0, x1, :]
                + ty * (1 - tx) * x[:, y1, x0, :]
                + ty * tx * x[:, y1, x1, :]
            )
    return out


def resize_naive(img, target):
    """General bilinear resize oracle for (H,W,C) images (down or up)."""
    return upsample_naive(img[None], target)[0]


def bn_train_naive(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=(0, 1, 2))
    var = x.var(axis=(0, 1, 2))
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


def global_avg_pool_naive(x):
    n, h, w, c = x.shape
    out = np.zeros((n, c))
    for b in range(n):
        for ch in range(c):
            out[b, ch] = sum(x[b, i, j, ch] for i in range(h) for j in range(w)) / (h * w)
    return out


def fcconv_straightline(x, p, pool):
    """Straight-line transcription of the calibration-conv equation flow.

    ``p`` maps f1/f2/f3/f4 to (kernel, bias) plus bn1/bn4 to (gamma, beta).
    The two batch norms run in train mode (batch statistics).
    """
    c = x.shape[-1]
    half = c // 2
    i1 = x[..., :half]
    i2 = x[..., half:]
    i1_prime = relu_np(bn_train_naive(conv2d_naive(i1, *p["f1"]), *p["bn1"]))
    local = relu_np(conv2d_naive(i2, *p["f3"]))
    pooled = avgpool_naive(i2, (pool, pool), (pool, pool), ceil_mode=True)
    up = upsample_naive(relu_np(conv2d_naive(pooled, *p["f2"])), x.shape[1:3])
    gate = sigmoid_np(up + i2)
    i2_prime = relu_np(bn_train_naive(conv2d_naive(local * gate, *p["f4"]), *p["bn4"]))
    return np.concatenate([i1_prime, i2_prime], axis=-1)


def cam_bruteforce(x, beta):
    """Per-sample channel-Gram softmax attention, scalar loops."""
    n, h, w, c = x.shape
    ns = h * w
    out = np.zeros_like(x, dtype=np.float64)
    for b in range(n):
        q = np.zeros((c, ns))
        for ch in range(c):
            q[ch, :] = x[b, :, :, ch].reshape(-1)
        gram = np.zeros((c, c))
        for i in range(c):
            for j in range(c):
                gram[i, j] = sum(q[i, k] * q[j, k] for k in range(ns))
        u = np.zeros((c, c))
        for i in range(c):
            row = gram[i] - gram[i].max()
            e = np.exp(row)
            u[i] = e / e.sum()
        refined = u @ q
        for ch in range(c):
            out[b, :, :, ch] = beta * refined[ch].reshape(h, w) + x[b, :, :, ch]
    return out


def binary_counting_oracle(scores, labels, threshold):
    """One-sample-at-a-time metric counting (percent scale)."""
    n_attack = n_bona = miss_attack = miss_bona = correct = 0
    for s, y in zip(scores, labels):
        pred_attack = s >= threshold
        if y == 1:
            n_attack += 1
            if not pred_attack:
                miss_attack += 1
            else:
                correct += 1
        else:
            n_bona += 1
            if pred_attack:
                miss_bona += 1
            else:
                correct += 1
    aa = 100.0 * correct / (n_attack + n_bona)
    apcer = 100.0 * miss_attack / n_attack if n_attack else None
    npcer = 100.0 * miss_bona / n_bona if n_bona else None
    return aa, apcer, npcer


def det_enumeration_oracle(scores, labels):
    """Exhaustive threshold sweep; returns the crossing bracket and, when a
    threshold hits apcer == npcer exactly, that common value."""
    thresholds = sorted(set(scores)) + [max(scores) + 1.0]
    rows = []
    for t in thresholds:
        att = [s for s, y in zip(scores, labels) if y == 1]
        bon = [s for s, y in zip(scores, labels) if y == 0]
        apcer = 100.0 * sum(1 for s in att if s < t) / len(att)
        npcer = 100.0 * sum(1 for s in bon if s >= t) / len(bon)
        rows.append((t, apcer, npcer))
    exact = None
    bracket = None
    for (t0, a0, n0), (t1, a1, n1) in zip(rows, rows[1:]):
        if a0 == n0:
            exact = a0
            bracket = (a0, a0)
            break
        if a0 - n0 < 0 <= a1 - n1:
            lo = min(a0, n1)
            hi = max(a1, n0)
            bracket = (lo, hi)
            if a1 == n1:
                exact = a1
            break
    return rows, exact, bracket


def adam_two_steps_oracle(p0, grads, lr, b1, b2, eps):
    """Hand-rolled Adam trajectory for a constant-shape parameter."""
    m = np.zeros_like(p0)
    v = np.zeros_like(p0)
    p = p0.copy()
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p
