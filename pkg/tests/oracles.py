"""Independent reference implementations used only by the tests."""

import numpy as np


def naive_conv2d(x, w, b, stride=1, padding=0, dilation=1):
    """Quintuple nested-loop cross-correlation, summing over (c, ki, kj)."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for bi in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for ki in range(k):
                            for kj in range(k):
                                r = i * stride + ki * dilation - padding
                                s = j * stride + kj * dilation - padding
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += x[bi, c, r, s] * w[co, c, ki, kj]
                    out[bi, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


def central_difference(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def confusion_uar(cm):
    cm = np.asarray(cm, dtype=float)
    recalls = []
    for c in range(cm.shape[0]):
        recalls.append(cm[c, c] / cm[c].sum())
    return sum(recalls) / len(recalls)


def confusion_f1s(cm):
    cm = np.asarray(cm, dtype=float)
    out = []
    for c in range(cm.shape[0]):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c].sum() - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        out.append(2 * p * r / (p + r) if p + r else 0.0)
    return out
