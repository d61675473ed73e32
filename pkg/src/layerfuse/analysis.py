"""Layer-attention profiles by IoU group, PCA projections, and nearest-neighbour margins."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Tensor
from .encoder import make_batch
from .fusion import WEIGHTLESS
from .head import iou
from .model import GroundingModel
from .numeric import ParamStore


class UnsupportedAnalysisError(ValueError):
    pass


# ---------------------------------------------------------- attention profile

@dataclass
class AttentionProfile:
    group: str                          # "IoU>0" or "IoU=0"
    mean_weight_per_layer: np.ndarray   # [L+1]
    region_count: int


GROUPS = ("IoU>0", "IoU=0")


def _forward_all(model: GroundingModel, params: ParamStore, samples: Sequence, batch_size: int = 64):
    """Yield ``(sample, ForwardResult, row)`` for every sample, in dataset order."""
    leaves = {k: Tensor(v) for k, v in params.items()}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        out = model.forward(leaves, make_batch(chunk))
        for b, s in enumerate(chunk):
            yield s, out, b


def attention_group_profile(model: GroundingModel, params: ParamStore,
                            samples: Sequence) -> dict[str, AttentionProfile]:
    """Mean layer-attention row of regions overlapping the ground truth vs. disjoint ones."""
    if model.kind in WEIGHTLESS:
        raise UnsupportedAnalysisError(f"{model.kind} fusion produces no layer attention weights")
    K = model.encoder.L + 1
    sums = {g: np.zeros(K) for g in GROUPS}
    counts = {g: 0 for g in GROUPS}
    for s, out, b in _forward_all(model, params, samples):
        w = out.weights.data[b, :s.n]
        for i, t in enumerate(s.iou_targets()):
            g = GROUPS[0] if t > 0 else GROUPS[1]
            sums[g] += w[i]
            counts[g] += 1
    return {g: AttentionProfile(g, sums[g] / counts[g] if counts[g] else np.zeros(K), counts[g])
            for g in GROUPS}


def profile_observations(profiles: dict[str, AttentionProfile]) -> list[str]:
    """Plain-language notes on where attention mass sits; informational only."""
    notes = []
    for g in GROUPS:
        p = profiles[g]
        if not p.region_count:
            notes.append(f"{g}: no regions")
            continue
        K = len(p.mean_weight_per_layer)
        half = K // 2
        upper = float(p.mean_weight_per_layer[K - half:].sum())
        lower = float(p.mean_weight_per_layer[:half].sum())
        trend = "upper" if upper > lower else "lower"
        notes.append(f"{g}: upper-half layer mass {upper:.3f} vs lower-half {lower:.3f} "
                     f"({trend} layers dominate; peak at layer {int(np.argmax(p.mean_weight_per_layer))})")
    a, b = profiles[GROUPS[0]], profiles[GROUPS[1]]
    if a.region_count and b.region_count:
        K = len(a.mean_weight_per_layer)
        half = K // 2
        la = float(a.mean_weight_per_layer[:half].sum())
        lb = float(b.mean_weight_per_layer[:half].sum())
        rel = "more" if la > lb else "less"
        notes.append(f"IoU>0 regions put {rel} weight on the lower half of the layers than IoU=0 regions "
                     f"({la:.3f} vs {lb:.3f})")
    return notes


def profile_csv(profiles: dict[str, AttentionProfile]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "layer", "mean_weight", "count"])
    for g in GROUPS:
        p = profiles[g]
        for layer, v in enumerate(p.mean_weight_per_layer):
            w.writerow([g, layer, repr(float(v)), p.region_count])
    return buf.getvalue()


# ----------------------------------------------------------------------- PCA

def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in descending order and the matching column eigenvectors.
    """
    A = np.array(a, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"expected a square matrix, got {A.shape}")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max(initial=0.0))):
        raise ValueError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    scale = max(np.sqrt((A * A).sum()), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.sqrt(((A - np.diag(np.diag(A))) ** 2).sum())
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-18 * scale:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cp, cq = A[:, p].copy(), A[:, q].copy()
                A[:, p], A[:, q] = c * cp - s * cq, s * cp + c * cq
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :], A[q, :] = c * rp - s * rq, s * rp + c * rq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
    vals = np.diag(A).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], V[:, order]


def _orient(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12 * max(np.abs(v).max(), 1e-300))
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


@dataclass
class PCAResult:
    coords: np.ndarray              # [n, 2]
    components: np.ndarray          # [2, d], unit rows
    explained_variance: np.ndarray  # [2] fractions of total variance


def pca_2d(x: np.ndarray) -> PCAResult:
    """Project rows of ``x`` onto the top-2 principal axes.

    Uses the d x d covariance when d <= n, otherwise the n x n Gram matrix of the
    centred data (same nonzero spectrum, far smaller).  Each axis is signed so
    its first nonzero loading is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n < 3:
        raise ValueError(f"PCA projection needs at least 3 points, got {n}")
    xc = x - x.mean(axis=0)
    total = float((xc * xc).sum())
    if d <= n:
        vals, vecs = jacobi_eigh(xc.T @ xc)
        comps = [vecs[:, k] for k in range(min(2, d))]
    else:
        vals, u = jacobi_eigh(xc @ xc.T)
        comps = []
        for k in range(2):
            v = xc.T @ u[:, k]
            norm = np.linalg.norm(v)
            comps.append(v / norm if norm > 1e-12 * max(1.0, np.sqrt(total)) else np.zeros(d))
    while len(comps) < 2:
        comps.append(np.zeros(d))
    comps = np.array([_orient(c) for c in comps])
    vals = np.clip(vals[:2], 0.0, None)
    explained = vals / total if total > 0 else np.zeros(2)
    if explained.size < 2:
        explained = np.pad(explained, (0, 2 - explained.size))
    return PCAResult(xc @ comps.T, comps, explained)


@dataclass
class Projection2D:
    points: list[tuple[float, float, str]]
    explained_variance: tuple[float, float]


def iou_band(sample, i: int) -> str:
    if i == sample.target_index:
        return "gt"
    v = iou(sample.regions[i].box, sample.target_box)
    if v > 0.5:
        return "iou>0.5"
    if v > 0:
        return "overlap"
    return "disjoint"


def region_representations(model: GroundingModel, params: ParamStore, sample, source) -> np.ndarray:
    """Region vectors ``[n, d]`` of one sample at a layer index or after fusion (``"fused"``)."""
    leaves = {k: Tensor(v) for k, v in params.items()}
    out = model.forward(leaves, make_batch([sample]))
    if source == "fused":
        return out.fused.data[0]
    layer = int(source)
    if not 0 <= layer <= model.encoder.L:
        raise ValueError(f"layer {layer} outside [0, {model.encoder.L}]")
    return out.region_layers[layer].data[0]


def pca_project_regions(model: GroundingModel, params: ParamStore, sample, source="fused") -> Projection2D:
    reps = region_representations(model, params, sample, source)
    res = pca_2d(reps)
    pts = [(float(res.coords[i, 0]), float(res.coords[i, 1]), iou_band(sample, i)) for i in range(sample.n)]
    return Projection2D(pts, (float(res.explained_variance[0]), float(res.explained_variance[1])))


def projection_csv(proj: Projection2D) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["region_id", "x", "y", "iou_band"])
    for i, (x, y, band) in enumerate(proj.points):
        w.writerow([i, repr(x), repr(y), band])
    return buf.getvalue()


# ------------------------------------------------------------------- margins

def nearest_neighbor_margin(vectors: np.ndarray, gt_index: int) -> float:
    """Euclidean distance from the ground-truth vector to its closest other vector."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.shape[0] < 2:
        raise ValueError("margin needs at least two regions")
    dist = np.sqrt(((v - v[gt_index]) ** 2).sum(axis=1))
    dist[gt_index] = np.inf
    return float(dist.min())


def margins(model: GroundingModel, params: ParamStore, samples: Sequence) -> list[tuple[int, float, float]]:
    """``(sample_id, margin_top, margin_fused)`` for every sample with at least two regions."""
    rows = []
    L = model.encoder.L
    for s, out, b in _forward_all(model, params, samples):
        if s.n < 2:
            continue
        top = out.region_layers[L].data[b, :s.n]
        fused = out.fused.data[b, :s.n]
        rows.append((s.id, nearest_neighbor_margin(top, s.target_index),
                     nearest_neighbor_margin(fused, s.target_index)))
    return rows


def margins_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "margin_top", "margin_fused"])
    for sid, a, b in rows:
        w.writerow([sid, repr(a), repr(b)])
    return buf.getvalue()
