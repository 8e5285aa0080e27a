"""Self-supervision: SDF bounds and approximate gradients from a sample batch,
and the four-term training loss with its derivatives."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

from .geometry import SampleBatch


class BoundKind(str, Enum):
    RAY = "ray"
    NORMAL = "normal"
    BATCH = "batch"


@dataclass(frozen=True)
class BoundMethod:
    kind: BoundKind = BoundKind.BATCH
    max_dist: float = 0.30  # normal correction zone around the ray-surface point

    def __post_init__(self):
        object.__setattr__(self, "kind", BoundKind(self.kind))
        if self.max_dist <= 0:
            raise ValueError("max_dist must be positive")


@dataclass(frozen=True)
class LossConfig:
    beta: float = 5.0
    trunc: float = 0.10
    eik_cutoff: float = 0.10
    lambda_surf: float = 5.0
    lambda_grad: float = 0.02
    lambda_eik: float = 0.25
    bound: BoundMethod = BoundMethod()

    def __post_init__(self):
        for name in ("beta", "trunc", "eik_cutoff", "lambda_surf"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_grad < 0 or self.lambda_eik < 0:
            raise ValueError("loss weights must be non-negative")


# ---------------------------------------------------------------------------
# bounds


def _sign(batch: SampleBatch) -> np.ndarray:
    return np.sign(batch.measured - batch.depth)


def ray_bound(batch: SampleBatch) -> np.ndarray:
    """sgn(D - d) * |x - p| with p the ray-surface intersection."""
    return _sign(batch) * np.linalg.norm(batch.points - batch.surface_points, axis=1)


def normal_bound(batch: SampleBatch, max_dist: float = 0.30) -> tuple[np.ndarray, np.ndarray]:
    """Ray bound scaled by |r . n| inside the correction zone.

    Returns (bounds, corrected_mask). Samples outside the zone or with an
    invalid normal keep the ray bound.
    """
    rb = ray_bound(batch)
    dist = np.abs(rb)
    cos = np.abs(np.einsum("ij,ij->i", batch.ray_dirs, np.nan_to_num(batch.normals)))
    valid_n = np.isfinite(batch.normals).all(axis=1)
    use = valid_n & (dist < max_dist)
    b = np.where(use, rb * np.minimum(cos, 1.0), rb)
    return b, use


def _nearest_scan(points: np.ndarray, surface: np.ndarray, chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Chunked all-pairs scan; argmin keeps the lowest index on ties."""
    n = len(points)
    idx = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    for i in range(0, n, chunk):
        q = points[i : i + chunk]
        d2 = ((q[:, None, :] - surface[None, :, :]) ** 2).sum(-1)
        j = np.argmin(d2, axis=1)
        idx[i : i + chunk] = j
        best[i : i + chunk] = d2[np.arange(len(q)), j]
    return best, idx


def nearest_surface(points: np.ndarray, surface: np.ndarray, k: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Nearest surface point per query. Returns (distance, index).

    A k-d tree proposes ``k`` candidates, which are re-ranked with the same
    arithmetic as the all-pairs scan, lowest index winning ties. Rows where
    the k-th candidate could still tie the best fall back to the scan, so the
    result equals the brute-force answer bit for bit.
    """
    points = np.asarray(points, dtype=np.float64)
    surface = np.asarray(surface, dtype=np.float64)
    k = min(k, len(surface))
    if k == 0:
        raise ValueError("no surface points")
    _, cand = cKDTree(surface).query(points, k=k)
    cand = np.asarray(cand, dtype=np.int64).reshape(len(points), k)
    cand.sort(axis=1)  # ascending index, so argmin picks the lowest on ties
    d2 = ((points[:, None, :] - surface[cand]) ** 2).sum(-1)
    col = np.argmin(d2, axis=1)
    rows = np.arange(len(points))
    best = d2[rows, col]
    idx = cand[rows, col]
    if k < len(surface):
        # the tree's k-th distance bounds every unseen point from below
        kth = d2.max(axis=1)
        unsure = kth <= best * (1 + 1e-9) + 1e-300
        if unsure.any():
            best[unsure], idx[unsure] = _nearest_scan(points[unsure], surface)
    return np.sqrt(best), idx


def nearest_surface_bruteforce(points: np.ndarray, surface: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reference all-pairs scan, one query at a time."""
    dist = np.empty(len(points))
    idx = np.empty(len(points), dtype=np.int64)
    for i, x in enumerate(points):
        d2 = ((x[None, :] - surface) ** 2).sum(-1)
        j = int(np.argmin(d2))
        idx[i] = j
        dist[i] = np.sqrt(d2[j])
    return dist, idx


def batch_bound(batch: SampleBatch) -> tuple[np.ndarray, np.ndarray]:
    """sgn(D - d) * min_p |x - p| over the batch surface samples.

    Returns (bounds, nearest surface point per sample).
    """
    surf = batch.points[batch.is_surface]
    if len(surf) == 0:
        raise ValueError("batch contains no surface samples")
    dist, j = nearest_surface(batch.points, surf)
    return _sign(batch) * dist, surf[j]


def approx_gradient(batch: SampleBatch, nearest: np.ndarray) -> np.ndarray:
    """sgn(D - d) * (x - p); surface samples take the depth-image normal instead.

    Zero rows mark samples without a usable gradient target.
    """
    g = _sign(batch)[:, None] * (batch.points - nearest)
    surf = batch.is_surface
    nrm = batch.normals[surf]
    ok = np.isfinite(nrm).all(axis=1)
    g[surf] = np.where(ok[:, None], np.nan_to_num(nrm), 0.0)
    return g


def compute_supervision(batch: SampleBatch, method: BoundMethod) -> SampleBatch:
    """Fill bounds and approximate gradients using the chosen bound method."""
    kind = method.kind
    if kind is BoundKind.BATCH:
        b, nearest = batch_bound(batch)
        g = approx_gradient(batch, nearest)
        return batch.with_supervision(b, g)
    g = approx_gradient(batch, batch.surface_points)
    if kind is BoundKind.RAY:
        return batch.with_supervision(ray_bound(batch), g)
    b, _ = normal_bound(batch, method.max_dist)
    fallback = int((~np.isfinite(batch.normals).all(axis=1)).sum())
    return batch.with_supervision(b, g, normal_fallbacks=fallback)


# ---------------------------------------------------------------------------
# per-sample losses


def free_space_loss(f, b, beta: float = 5.0):
    f = np.asarray(f)
    return np.maximum(np.maximum(0.0, np.exp(-beta * f) - 1.0), f - b)


def near_surface_loss(f, b):
    return np.abs(np.asarray(f) - b)


def sdf_loss(f, b, depth_gap, cfg: LossConfig):
    """lambda_surf * |f - b| within the truncation band |D - d| <= t, free-space loss elsewhere."""
    near = np.abs(depth_gap) <= cfg.trunc
    return np.where(near, cfg.lambda_surf * near_surface_loss(f, b), free_space_loss(f, b, cfg.beta))


def grad_loss(grad_f, g):
    """Cosine distance per row; NaN where either vector has zero norm."""
    grad_f = np.atleast_2d(grad_f)
    g = np.atleast_2d(g)
    n1 = np.linalg.norm(grad_f, axis=-1)
    n2 = np.linalg.norm(g, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = 1.0 - np.einsum("ij,ij->i", grad_f, g) / (n1 * n2)
    out[(n1 == 0) | (n2 == 0)] = np.nan
    return out


def eik_loss(grad_f, depth_gap, a: float = 0.10):
    grad_f = np.atleast_2d(grad_f)
    mask = np.abs(depth_gap) >= a
    return np.where(mask, np.abs(np.linalg.norm(grad_f, axis=-1) - 1.0), 0.0)


@dataclass
class LossBreakdown:
    total: float
    sdf: float
    grad: float
    eik: float
    per_sample: np.ndarray  # per-sample total contribution, for keyframe bookkeeping
    f_bar: np.ndarray  # dL/df
    grad_bar: np.ndarray  # dL/d(grad f)
    n_grad: int
    n_eik: int
    grad_skipped: int

    def as_row(self) -> dict:
        return {"loss_total": self.total, "loss_sdf": self.sdf, "loss_grad": self.grad, "loss_eik": self.eik}


def total_loss(batch: SampleBatch, f: np.ndarray, grad_f: np.ndarray | None, cfg: LossConfig) -> LossBreakdown:
    """Mean-reduced loss terms, weighted sum, and derivatives w.r.t. f and grad f.

    L_sdf is averaged over all samples; L_grad over samples with a usable
    gradient target and non-zero predicted gradient; L_eik over samples with
    |D - d| >= a.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    if batch.bounds is None:
        raise ValueError("batch has no supervision; call compute_supervision first")
    f = np.asarray(f, dtype=np.float64)
    b = batch.bounds
    gap = batch.depth_gap
    near = np.abs(gap) <= cfg.trunc

    # sdf term
    fs_exp = np.exp(-cfg.beta * f) - 1.0
    fs_lin = f - b
    per_sdf = np.where(near, cfg.lambda_surf * np.abs(f - b), np.maximum(np.maximum(0.0, fs_exp), fs_lin))
    d_sdf = np.where(
        near,
        cfg.lambda_surf * np.sign(f - b),
        np.where(
            (fs_exp > 0) & (fs_exp >= fs_lin),
            -cfg.beta * (fs_exp + 1.0),
            np.where((fs_lin > 0) & (fs_lin > fs_exp), 1.0, 0.0),
        ),
    )
    L_sdf = per_sdf.mean()
    f_bar = d_sdf / n

    grad_bar = np.zeros((n, 3))
    per_grad = np.zeros(n)
    per_eik = np.zeros(n)
    L_grad = L_eik = 0.0
    n_grad = n_eik = skipped = 0
    if grad_f is not None and (cfg.lambda_grad > 0 or cfg.lambda_eik > 0):
        G = np.asarray(grad_f, dtype=np.float64)
        gnorm = np.linalg.norm(G, axis=1)
        g = batch.approx_grad
        tnorm = np.linalg.norm(g, axis=1)
        gm = (gnorm > 0) & (tnorm > 0)
        skipped = int((~gm).sum())
        n_grad = int(gm.sum())
        if n_grad and cfg.lambda_grad > 0:
            Gm, gm_t = G[gm], g[gm] / tnorm[gm, None]
            nm = gnorm[gm]
            cos = np.einsum("ij,ij->i", Gm, gm_t) / nm
            per_grad[gm] = 1.0 - cos
            L_grad = per_grad[gm].mean()
            dcos = gm_t / nm[:, None] - cos[:, None] * Gm / (nm**2)[:, None]
            grad_bar[gm] += -cfg.lambda_grad * dcos / n_grad
        em = np.abs(gap) >= cfg.eik_cutoff
        n_eik = int(em.sum())
        if n_eik and cfg.lambda_eik > 0:
            resid = gnorm[em] - 1.0
            per_eik[em] = np.abs(resid)
            L_eik = per_eik[em].mean()
            with np.errstate(invalid="ignore", divide="ignore"):
                unit = np.where(gnorm[em, None] > 0, G[em] / gnorm[em, None], 0.0)
            grad_bar[em] += cfg.lambda_eik * np.sign(resid)[:, None] * unit / n_eik

    total = L_sdf + cfg.lambda_grad * L_grad + cfg.lambda_eik * L_eik
    for name, val in (("sdf", L_sdf), ("grad", L_grad), ("eik", L_eik)):
        if not np.isfinite(val):
            bad = np.nonzero(~np.isfinite(per_sdf if name == "sdf" else per_grad if name == "grad" else per_eik))[0]
            raise FloatingPointError(f"non-finite {name} loss term at samples {bad[:10].tolist()}")
    per_sample = per_sdf + cfg.lambda_grad * per_grad + cfg.lambda_eik * per_eik
    return LossBreakdown(
        total=float(total), sdf=float(L_sdf), grad=float(L_grad), eik=float(L_eik),
        per_sample=per_sample, f_bar=f_bar, grad_bar=grad_bar,
        n_grad=n_grad, n_eik=n_eik, grad_skipped=skipped,
    )
