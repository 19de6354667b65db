"""Plain-Python reference implementations used as test oracles.

These deliberately avoid numpy vectorization and torch so they share no code
paths with the package under test.
"""
from __future__ import annotations

import cmath
import math


def js_brute(p, q) -> float:
    total = 0.0
    for a, b in zip(p, q):
        a, b = float(a), float(b)
        m = 0.5 * (a + b)
        if a > 0.0:
            total += 0.5 * a * math.log2(a / m)
        if b > 0.0:
            total += 0.5 * b * math.log2(b / m)
    return total


def bce(s: float, y: float, eps: float = 1e-7) -> float:
    s = min(max(s, eps), 1.0 - eps)
    return -(y * math.log(s) + (1.0 - y) * math.log(1.0 - s))


def dist_loop(sync, cont) -> float:
    return sum(bce(float(a), float(c)) for a, c in zip(sync, cont)) / len(sync)


def contra_loop(sync, cont, y: float, margin: float = 1.0) -> float:
    acc = 0.0
    for a, c in zip(sync, cont):
        d = abs(float(c) - float(a))
        acc += y * d * d + (1.0 - y) * max(margin - d, 0.0) ** 2
    return acc / len(sync)


def total_loop(cls, dist, contra) -> float:
    return sum(a + b + c for a, b, c in zip(cls, dist, contra)) / len(cls)


def cosine_sync(u, v) -> float:
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    cos = 0.0 if nu == 0.0 or nv == 0.0 else dot / (nu * nv)
    return (cos + 1.0) / 2.0


def auc_loop(fake_scores, labels) -> float:
    """Probability a random fake outscores a random real; ties count half."""
    fakes = [s for s, y in zip(fake_scores, labels) if y == 0]
    reals = [s for s, y in zip(fake_scores, labels) if y == 1]
    wins = 0.0
    for f in fakes:
        for r in reals:
            wins += 1.0 if f > r else 0.5 if f == r else 0.0
    return wins / (len(fakes) * len(reals))


def power_spectrum_dft(frame, n_fft: int):
    """|X_k|^2 / n_fft for k = 0..n_fft/2 by direct summation."""
    padded = list(frame) + [0.0] * (n_fft - len(frame))
    out = []
    for k in range(n_fft // 2 + 1):
        acc = 0j
        for n, x in enumerate(padded):
            acc += x * cmath.exp(-2j * math.pi * k * n / n_fft)
        out.append(abs(acc) ** 2 / n_fft)
    return out


def dct2_ortho(x, n_out: int):
    N = len(x)
    out = []
    for k in range(n_out):
        acc = sum(x[n] * math.cos(math.pi * k * (2 * n + 1) / (2 * N)) for n in range(N))
        scale = math.sqrt(1.0 / N) if k == 0 else math.sqrt(2.0 / N)
        out.append(scale * acc)
    return out
