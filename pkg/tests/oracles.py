"""Independent reference computations used by the tests.

Nothing here imports the engine: parameter counts are layer-by-layer
arithmetic, convolution and products are plain loops, Adam is a scalar
re-implementation and the Welch test is evaluated with mpmath.
"""

from __future__ import annotations

import math

import mpmath
import numpy as np


# ---------------------------------------------------------------------------
# parameter counts


def conv_params(c_in: int, c_out: int, k: int = 3, pieces: int = 1) -> int:
    """A conv producing ``c_out`` maps after ``pieces``-way maxout (c_out*pieces linear maps)."""
    maps = c_out * pieces
    return maps * (c_in * k * k + 1)


def dense_params(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def bn_params(c: int) -> int:
    return 2 * c


def kerasnet(classes: int = 10) -> int:
    n = conv_params(3, 64) + conv_params(64, 64)
    n += conv_params(64, 128) + conv_params(128, 128)
    n += dense_params(128 * 8 * 8, 512) + dense_params(512, classes)
    return n


def x_kerasnet(classes: int = 10) -> int:
    y = conv_params(1, 32) + conv_params(32, 32)
    uv = conv_params(1, 16) + conv_params(16, 16)
    cross = 2 * conv_params(32, 32, 1) + 2 * conv_params(16, 16, 1)
    y_in, uv_in = 32 + 16 + 16, 16 + 32
    y2 = conv_params(y_in, 64) + conv_params(64, 64)
    uv2 = conv_params(uv_in, 32) + conv_params(32, 32)
    flat = (64 + 32 + 32) * 8 * 8
    return y + 2 * uv + cross + y2 + 2 * uv2 + dense_params(flat, 512) + dense_params(512, classes)


def _maxout_stack(c_in: int, widths: list[int]) -> tuple[int, int]:
    n = 0
    for w in widths:
        n += conv_params(c_in, w, 3, 2) + bn_params(w)
        c_in = w
    return n, c_in


def fitnet4(classes: int = 10) -> int:
    n, c = _maxout_stack(3, [32] * 3 + [48] * 2 + [80] * 6 + [128] * 6)
    n += dense_params(c, 500 * 5) + bn_params(500) + dense_params(500, classes)
    return n


def _edge(c_in: int, c_out: int, pieces: int) -> int:
    return conv_params(c_in, c_out, 1, pieces) + bn_params(c_out)


def x_fitnet4(classes: int = 10, pieces: int = 1) -> int:
    """``pieces=1``: linear 1x1 cross-connections; ``pieces=2``: maxout ones."""
    n = 0
    y, _ = _maxout_stack(1, [24] * 3 + [36] * 2)
    uv, _ = _maxout_stack(1, [12] * 3 + [18] * 2)
    n += y + 2 * uv
    # first cross segment
    n += _edge(36, 36, pieces) + 2 * _edge(18, 18, pieces)
    n += 2 * _edge(36, 12, pieces) + 2 * _edge(18, 12, pieces)
    y, _ = _maxout_stack(36 + 12 + 12, [60] * 6)
    uv, _ = _maxout_stack(18 + 12, [30] * 6)
    n += y + 2 * uv
    # second cross segment
    n += _edge(60, 60, pieces) + 2 * _edge(30, 30, pieces)
    n += 2 * _edge(60, 18, pieces) + 2 * _edge(30, 18, pieces)
    y, _ = _maxout_stack(60 + 18 + 18, [96] * 6)
    uv, _ = _maxout_stack(30 + 18, [48] * 6)
    n += y + 2 * uv
    n += dense_params(96 + 48 + 48, 500 * 5) + bn_params(500) + dense_params(500, classes)
    return n


CLOSED_FORM = {"kerasnet": kerasnet, "x-kerasnet": x_kerasnet, "fitnet4": fitnet4, "x-fitnet4": x_fitnet4}


# ---------------------------------------------------------------------------
# loops


def conv_loops(x: np.ndarray, w: np.ndarray, b: np.ndarray, pad: int) -> np.ndarray:
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh, ow = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    out = np.zeros((n, f, oh, ow))
    for i in range(n):
        for o in range(f):
            for r in range(oh):
                for s in range(ow):
                    acc = b[o]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ch, r + u, s + v] * w[o, ch, u, v]
                    out[i, o, r, s] = acc
    return out


def matmul_loops(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, d = x.shape
    k = w.shape[1]
    out = np.zeros((n, k))
    for i in range(n):
        for j in range(k):
            out[i, j] = b[j] + sum(x[i, t] * w[t, j] for t in range(d))
    return out


# ---------------------------------------------------------------------------
# optimizers and statistics


def scalar_adam(grad, x0: float, steps: int, lr: float, b1=0.9, b2=0.999, eps=1e-8) -> list[float]:
    x, m, v = x0, 0.0, 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        x = x - lr * mh / (math.sqrt(vh) + eps)
        out.append(x)
    return out


def welch_mp(a, b) -> tuple[float, float]:
    """Welch t and two-sided p from the Student-t CDF written as a regularized incomplete beta."""
    mpmath.mp.dps = 40
    a = [mpmath.mpf(str(v)) for v in a]
    b = [mpmath.mpf(str(v)) for v in b]
    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    va = sum((v - ma) ** 2 for v in a) / (na - 1)
    vb = sum((v - mb) ** 2 for v in b) / (nb - 1)
    se2 = va / na + vb / nb
    t = (ma - mb) / mpmath.sqrt(se2)
    df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = mpmath.betainc(df / 2, mpmath.mpf(1) / 2, 0, df / (df + t * t), regularized=True)
    return float(t), float(p)


# ---------------------------------------------------------------------------
# published sweep results (percent); None marks a column that was not run

_P = (1, 5, 10, 15, 20, 30, 40, 50, 60, 70, 80, 90, 100)


def _row(*vals):
    return dict(zip(_P, vals))


_DASH = (None,) * 4

SWEEP_TABLES = {
    "cifar10": {
        "kerasnet": _row(37.94, 53.82, 62.95, 67.39, 70.26, 74.39, 76.62, 78.55, *_DASH, 82.50),
        "x-kerasnet": _row(41.19, 57.84, 65.01, 68.25, 71.36, 74.79, 76.96, 78.57, *_DASH, 82.62),
        "fitnet4": _row(38.97, 56.78, 70.37, 75.07, 78.50, 81.95, 83.95, 85.22, *_DASH, 89.56),
        "x-fitnet4": _row(39.21, 60.57, 70.82, 76.09, 79.40, 83.36, 84.25, 86.14, *_DASH, 90.13),
    },
    "cifar10-aug": {
        "kerasnet": _row(45.45, 67.01, 70.89, 78.83, 80.97, 83.23, 83.64, 85.02, *_DASH, 86.66),
        "x-kerasnet": _row(49.60, 69.28, 72.51, 78.96, 80.58, 83.10, 83.89, 85.37, *_DASH, 87.41),
        "fitnet4": _row(40.91, 65.73, 75.55, 80.85, 83.63, 86.23, 88.30, 89.11, *_DASH, 92.27),
        "x-fitnet4": _row(42.02, 65.54, 77.06, 81.33, 83.94, 86.41, 88.13, 89.37, *_DASH, 92.50),
    },
    "cifar100": {
        "kerasnet": _row(7.55, 15.10, 20.24, 24.76, 28.18, 32.43, 36.29, 38.61, 41.63, 44.10, 45.56, 46.26, 48.26),
        "x-kerasnet": _row(8.05, 16.45, 23.04, 26.91, 30.08, 35.39, 39.13, 41.88, 42.50, 45.96, 46.73, 48.25,
                           49.98),
        "fitnet4": _row(6.48, 16.84, 22.12, 28.30, 35.52, 39.28, 43.59, 49.69, 50.42, 55.83, 56.62, 58.00, 59.78),
        "x-fitnet4": _row(6.64, 18.73, 27.57, 33.59, 38.38, 45.53, 49.68, 52.21, 55.55, 57.22, 59.52, 60.87,
                          62.20),
    },
    "cifar100-aug": {
        "kerasnet": _row(9.09, 24.68, 32.63, 38.64, 42.62, 47.64, 49.91, 52.46, 53.77, 54.26, 55.12, 55.42, 55.45),
        "x-kerasnet": _row(10.16, 27.15, 35.58, 42.05, 43.77, 48.80, 50.48, 54.25, 54.90, 55.33, 55.68, 56.82,
                           57.18),
        "fitnet4": _row(7.25, 17.94, 23.55, 29.24, 38.76, 48.07, 50.06, 56.01, 58.55, 59.80, 62.38, 63.60, 65.59),
        "x-fitnet4": _row(7.35, 20.39, 28.69, 37.86, 43.75, 50.48, 55.40, 57.92, 60.70, 62.76, 66.18, 66.27, 67.19),
    },
}


def sweep_history(table: str) -> dict[int, list[tuple[float, float]]]:
    """p -> [(KerasNet, X-KerasNet), (FitNet4, X-FitNet4)] as fractions, for the populated columns."""
    t = SWEEP_TABLES[table]
    out = {}
    for p in _P:
        if t["kerasnet"][p] is None:
            continue
        out[p] = [(t[b][p] / 100, t[x][p] / 100) for b, x in (("kerasnet", "x-kerasnet"), ("fitnet4", "x-fitnet4"))]
    return out


def populated_columns(table: str) -> list[int]:
    return [p for p in _P if SWEEP_TABLES[table]["kerasnet"][p] is not None]
