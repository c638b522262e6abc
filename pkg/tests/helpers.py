"""Independent oracles shared by the test modules."""

import numpy as np

from lvit.autodiff import ComputeRecord, Parameter


def write_phoenix(header: dict, magnitude: np.ndarray, phase: np.ndarray | None = None) -> bytes:
    """Minimal Phoenix writer: ASCII header verbatim, terminator, big-endian float32 blocks."""
    text = "[PhoenixHeaderVer01.04]\n"
    text += "".join(f"{k}= {v}\n" for k, v in header.items())
    text += "[EndofPhoenixHeader]\n"
    if phase is None:
        phase = np.zeros_like(magnitude)
    body = magnitude.astype(">f4").tobytes() + phase.astype(">f4").tobytes()
    return text.encode("ascii") + body


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


def analytic_grad(build, *params: Parameter):
    for p in params:
        p.zero_grad()
    with ComputeRecord() as rec:
        loss = build()
    rec.backward(loss)
    return [p.grad.copy() for p in params]


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


def scripted_metrics(counts):
    """From-scratch per-class and macro scores using plain Python loops."""
    k = len(counts)
    per = []
    for c in range(k):
        tp = counts[c][c]
        col = sum(counts[r][c] for r in range(k))
        row = sum(counts[c][q] for q in range(k))
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        per.append((p, r, f))
    total = sum(sum(row) for row in counts)
    macro = tuple(sum(x[i] for x in per) / k for i in range(3))
    return per, macro, sum(counts[c][c] for c in range(k)) / total
