"""Independent brute-force references used by the tests."""

import numpy as np


def conv2d_oracle(x, w, b, stride=1, pad=0):
    """Direct summation cross-correlation, (Cin,H,W) input."""
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0 if b is None else float(b[o])
                for c in range(cin):
                    for di in range(k):
                        for dj in range(k):
                            acc += xp[c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                out[o, i, j] = acc
    return out


def maxpool_oracle(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2))
    for ch in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                out[ch, i, j] = max(
                    x[ch, 2 * i, 2 * j], x[ch, 2 * i, 2 * j + 1], x[ch, 2 * i + 1, 2 * j], x[ch, 2 * i + 1, 2 * j + 1]
                )
    return out


def masked_rmse_oracle(pred, target, mask):
    total, count = 0.0, 0
    for c in range(pred.shape[0]):
        for i in range(pred.shape[1]):
            for j in range(pred.shape[2]):
                if mask[0, i, j] == 1:
                    total += (pred[c, i, j] - target[c, i, j]) ** 2
                    count += 1
    return (total / count) ** 0.5


def dft2_centered_oracle(x):
    """O(N^4) centered unitary DFT: DC at (H//2, W//2), origin at the same pixel."""
    h, w = x.shape
    ch, cw = h // 2, w // 2
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for m in range(h):
                for n in range(w):
                    phase = (u - ch) * (m - ch) / h + (v - cw) * (n - cw) / w
                    acc += x[m, n] * np.exp(-2j * np.pi * phase)
            out[u, v] = acc / np.sqrt(h * w)
    return out


def psnr_oracle(a, b, max_val=1.0):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    mean = 0.0
    for x, y in zip(a, b):
        mean += (x - y) ** 2
    mean /= a.size
    return 20.0 * np.log10(max_val / np.sqrt(mean))


def mae_oracle(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return sum(abs(x - y) for x, y in zip(a, b)) / a.size
