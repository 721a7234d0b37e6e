"""Naive reference implementations used as ground truth in equivalence tests.

Everything here is written with explicit Python loops over plain float arrays and
imports nothing from the rest of the package, so a bug in the vectorised path
cannot leak into its own reference. Maps are unbatched ``[C, H, W]`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class OracleReport:
    case_id: str
    max_abs_deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs_deviation <= self.tolerance


def compare(case_id: str, got, want, tol: float) -> OracleReport:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    if got.shape != want.shape:
        return OracleReport(case_id, math.inf, tol)
    dev = float(np.max(np.abs(got - want), initial=0.0))
    return OracleReport(case_id, dev, tol)


def _project(w, f):
    """out[o, y, x] = sum_c w[o, c] * f[c, y, x]"""
    c_out, c_in = len(w), len(w[0])
    h, wd = len(f[0]), len(f[0][0])
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for y in range(h):
            for x in range(wd):
                acc = 0.0
                for c in range(c_in):
                    acc += w[o][c] * f[c][y][x]
                out[o, y, x] = acc
    return out


def _pool(f, s):
    """Window max over s x s tiles, ragged edges kept."""
    c_n, h, wd = f.shape
    ho, wo = (h + s - 1) // s, (wd + s - 1) // s
    out = np.zeros((c_n, ho, wo))
    for c in range(c_n):
        for py in range(ho):
            for px in range(wo):
                best = -math.inf
                for y in range(py * s, min(py * s + s, h)):
                    for x in range(px * s, min(px * s + s, wd)):
                        if f[c, y, x] > best:
                            best = f[c, y, x]
                out[c, py, px] = best
    return out


def _positions(f):
    """List of per-position feature vectors in row-major position order."""
    c_n, h, wd = f.shape
    return [[f[c, y, x] for c in range(c_n)] for y in range(h) for x in range(wd)]


def oracle_can_operation(
    f_s,
    f_t,
    w_g,
    w_theta=None,
    w_phi=None,
    affinity: str = "dot_product",
    pool_scale: int = 1,
) -> np.ndarray:
    """Z for one student/teacher pair."""
    f_s = np.asarray(f_s, dtype=np.float64)
    f_t = np.asarray(f_t, dtype=np.float64)
    c_n, h, wd = f_s.shape
    if f_t.shape[1:] != (h, wd):
        raise ValueError("spatial mismatch")
    if affinity == "gaussian":
        if f_t.shape[0] != c_n:
            raise ValueError("gaussian affinity needs equal channel counts")
        query, key = f_s, f_t
    else:
        query = _project(np.asarray(w_theta), f_s)
        key = _project(np.asarray(w_phi), f_t)
    value = _project(np.asarray(w_g), f_t)
    if pool_scale > 1:
        key = _pool(key, pool_scale)
        value = _pool(value, pool_scale)

    xs = _positions(query)
    ys = _positions(key)
    gs = _positions(value)
    n_t = len(ys)
    z = np.zeros((c_n, h, wd))
    for i, xi in enumerate(xs):
        weights = []
        for yj in ys:
            dot = 0.0
            for a, b in zip(xi, yj):
                dot += a * b
            weights.append(math.exp(dot) if affinity != "dot_product" else dot)
        if affinity == "dot_product":
            norm = float(n_t)
        else:
            norm = 0.0
            for wgt in weights:
                norm += wgt
        for c in range(c_n):
            acc = 0.0
            for j in range(n_t):
                acc += weights[j] * gs[j][c]
            z[c, i // wd, i % wd] = acc / norm
    return z


def oracle_attention_rows(f_s, f_t, w_theta=None, w_phi=None, affinity: str = "gaussian", pool_scale: int = 1):
    """Normalised attention weights per student position (softmax affinities only)."""
    f_s = np.asarray(f_s, dtype=np.float64)
    f_t = np.asarray(f_t, dtype=np.float64)
    if affinity == "gaussian":
        query, key = f_s, f_t
    else:
        query = _project(np.asarray(w_theta), f_s)
        key = _project(np.asarray(w_phi), f_t)
    if pool_scale > 1:
        key = _pool(key, pool_scale)
    rows = []
    for xi in _positions(query):
        ws = [math.exp(sum(a * b for a, b in zip(xi, yj))) for yj in _positions(key)]
        total = sum(ws)
        rows.append([wgt / total for wgt in ws])
    return np.array(rows)


def oracle_can_block(
    f_s,
    f_t,
    w_g,
    w_z,
    w_theta=None,
    w_phi=None,
    affinity: str = "dot_product",
    pool_scale: int = 1,
    residual: bool = True,
) -> np.ndarray:
    z = oracle_can_operation(f_s, f_t, w_g, w_theta, w_phi, affinity, pool_scale)
    out = _project(np.asarray(w_z), z)
    if residual:
        f_s = np.asarray(f_s, dtype=np.float64)
        c_n, h, wd = f_s.shape
        for c in range(c_n):
            for y in range(h):
                for x in range(wd):
                    out[c, y, x] += f_s[c, y, x]
    return out


def oracle_instance_norm(f, eps: float = 1e-5) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    c_n, h, wd = f.shape
    n = h * wd
    out = np.zeros_like(f)
    for c in range(c_n):
        total = 0.0
        for y in range(h):
            for x in range(wd):
                total += f[c, y, x]
        mean = total / n
        sq = 0.0
        for y in range(h):
            for x in range(wd):
                sq += (f[c, y, x] - mean) ** 2
        denom = math.sqrt(sq / n + eps)
        for y in range(h):
            for x in range(wd):
                out[c, y, x] = (f[c, y, x] - mean) / denom
    return out


def oracle_feature_loss(f_t, f_s_star, eps: float = 1e-5, normalize: bool = True) -> float:
    """Mean over elements of the squared difference of the normalised maps."""
    a = oracle_instance_norm(f_t, eps) if normalize else np.asarray(f_t, dtype=np.float64)
    b = oracle_instance_norm(f_s_star, eps) if normalize else np.asarray(f_s_star, dtype=np.float64)
    total = 0.0
    count = 0
    for va, vb in zip(a.reshape(-1), b.reshape(-1)):
        total += (va - vb) ** 2
        count += 1
    return total / count


def oracle_total_loss(task: float, feat_losses, mu: float) -> float:
    feat = 0.0
    for v in feat_losses:
        feat += v
    return task + mu * feat
