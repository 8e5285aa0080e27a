"""Reconstruction metrics, evaluation point sets, SDF slices and mesh export."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .geometry import DepthFrame, DepthSamplingConfig, backproject, sample_depths

log = logging.getLogger(__name__)

SdfQuery = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# point sets


@dataclass
class EvalPointSet:
    points: np.ndarray  # (n, 3)
    sdf: np.ndarray  # (n,) ground truth
    grad: np.ndarray  # (n, 3) ground-truth gradient, NaN rows where unavailable
    frame_ids: np.ndarray  # (n,)
    time_index: int  # id of the latest frame allowed to contribute

    def __len__(self) -> int:
        return len(self.sdf)

    def subset(self, mask) -> "EvalPointSet":
        return EvalPointSet(self.points[mask], self.sdf[mask], self.grad[mask], self.frame_ids[mask], self.time_index)


def build_eval_points(
    frames: list[DepthFrame],
    gt,
    n: int = 200_000,
    seed: int = 0,
    cfg: DepthSamplingConfig = DepthSamplingConfig(),
) -> EvalPointSet:
    """Random pixels from the given frames, then stratified + Gaussian depths along their rays.

    ``gt`` is a scene (exact SDF and gradient) or a voxel grid (trilinear,
    central-difference gradient with a 2 cm step).
    """
    if not frames:
        raise ValueError("need at least one frame")
    rng = np.random.default_rng(seed)
    per_ray = cfg.n_stratified + cfg.n_gaussian
    n_rays = -(-n // per_ray)
    counts = np.bincount(rng.integers(0, len(frames), n_rays), minlength=len(frames))
    pts, fids = [], []
    for fr, k in zip(frames, counts):
        if k == 0:
            continue
        vv, uu = np.nonzero(fr.valid)
        if len(uu) == 0:
            continue
        sel = rng.integers(0, len(uu), k)
        u, v = uu[sel], vv[sel]
        D = fr.depth[v, u]
        keep = D > cfg.d_min
        u, v, D = u[keep], v[keep], D[keep]
        depths = sample_depths(D, cfg, rng, include_surface=False)
        ray_cam, _ = backproject(fr.intrinsics, fr.pose, u, v)
        p = fr.pose.apply((ray_cam[:, None, :] * depths[..., None]).reshape(-1, 3))
        pts.append(p)
        fids.append(np.full(len(p), fr.frame_id))
    points = np.concatenate(pts)[:n]
    frame_ids = np.concatenate(fids)[:n]
    sdf, grad = gt_values(gt, points)
    return EvalPointSet(points, sdf, grad, frame_ids, max(f.frame_id for f in frames))


def visible_mask(points: np.ndarray, frames: list[DepthFrame], behind: float = 0.10) -> np.ndarray:
    """True for points seen by any frame: inside its image, in front of the
    camera and no more than ``behind`` metres past the measured depth."""
    from .geometry import project

    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    seen = np.zeros(len(points), dtype=bool)
    for fr in frames:
        u, v, z = project(fr.intrinsics, fr.pose, points)
        with np.errstate(invalid="ignore"):
            ui, vi = np.rint(u), np.rint(v)
            ok = (z > 0) & (ui >= 0) & (ui <= fr.intrinsics.width - 1) & (vi >= 0) & (vi <= fr.intrinsics.height - 1)
        idx = np.nonzero(ok)[0]
        D = fr.depth[vi[idx].astype(int), ui[idx].astype(int)]
        hit = np.isfinite(D) & (z[idx] <= D + behind)
        seen[idx[hit]] = True
    return seen


def gt_values(gt, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    from .voxel import VoxelGrid, query

    if isinstance(gt, VoxelGrid):
        s, g, _ = query(gt, points)
        return s, g
    return gt.sdf_grad(points)


# ---------------------------------------------------------------------------
# metrics


def sdf_error(pred, gt):
    return np.abs(np.asarray(pred) - np.asarray(gt))


def chomp_cost(s, eps: float = 2.0):
    """Collision cost: linear inside obstacles, quadratic within eps of a surface, zero beyond."""
    s = np.asarray(s, dtype=np.float64)
    return np.where(s < 0, -s + 0.5 * eps, np.where(s <= eps, (s - eps) ** 2 / (2 * eps), 0.0))


def collision_cost_error(pred, gt, eps: float = 2.0, mapped=None):
    """|c(pred) - c(gt)|; unmapped predictions are charged the surface cost c(0)."""
    c_pred = chomp_cost(pred, eps)
    if mapped is not None:
        c_pred = np.where(mapped, c_pred, chomp_cost(0.0, eps))
    return np.abs(c_pred - chomp_cost(gt, eps))


def grad_cosine_distance(pred_grad, gt_grad) -> np.ndarray:
    """1 - cos(angle); NaN where either vector is zero or undefined."""
    a = np.atleast_2d(pred_grad)
    b = np.atleast_2d(gt_grad)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = 1.0 - np.einsum("ij,ij->i", a, b) / (na * nb)
    out[~((na > 0) & (nb > 0))] = np.nan
    return out


DEFAULT_BIN_EDGES = tuple(np.round(np.arange(0, 2.0001, 0.25), 2))


def binned_sdf_error(gt_sdf, errors, bin_edges=DEFAULT_BIN_EDGES) -> list[dict]:
    """Mean error per true-SDF bin. Values outside the edges land in open-ended
    under/overflow bins so that counts always sum to the number of points.
    Empty bins report mean None."""
    edges = np.concatenate([[-np.inf], np.asarray(bin_edges, float), [np.inf]])
    which = np.digitize(gt_sdf, edges[1:-1], right=False)
    rows = []
    for i in range(len(edges) - 1):
        m = which == i
        cnt = int(m.sum())
        if i in (0, len(edges) - 2) and cnt == 0:
            continue
        rows.append({"lo": edges[i], "hi": edges[i + 1], "count": cnt, "mean": float(errors[m].mean()) if cnt else None})
    return rows


@dataclass
class MetricReport:
    sdf_mean: float
    sdf_median: float
    collision_mean: float
    grad_mean: float
    n_points: int
    n_grad_invalid: int
    time_index: int
    bins: list[dict] = field(default_factory=list)
    label: str = ""

    COLUMNS = ("label", "time_index", "n_points", "sdf_mean", "sdf_median", "collision_mean", "grad_mean", "n_grad_invalid")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.COLUMNS}


def evaluate(
    points: EvalPointSet,
    pred: np.ndarray,
    pred_grad: np.ndarray,
    mapped: np.ndarray | None = None,
    eps: float = 2.0,
    label: str = "",
) -> MetricReport:
    err = sdf_error(pred, points.sdf)
    cerr = collision_cost_error(pred, points.sdf, eps, mapped)
    gerr = grad_cosine_distance(pred_grad, points.grad)
    ok = np.isfinite(gerr)
    return MetricReport(
        sdf_mean=float(err.mean()),
        sdf_median=float(np.median(err)),
        collision_mean=float(cerr.mean()),
        grad_mean=float(gerr[ok].mean()) if ok.any() else float("nan"),
        n_points=len(points),
        n_grad_invalid=int((~ok).sum()),
        time_index=points.time_index,
        bins=binned_sdf_error(points.sdf, err),
        label=label,
    )


def write_reports(path: str | Path, reports: list[MetricReport]) -> None:
    """MetricReport CSV: one row per report, columns ``MetricReport.COLUMNS``."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MetricReport.COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.row().items()})


def write_bins(path: str | Path, reports: list[MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "time_index", "bin_lo", "bin_hi", "count", "sdf_mean"])
        for r in reports:
            for b in r.bins:
                w.writerow([r.label, r.time_index, b["lo"], b["hi"], b["count"], "" if b["mean"] is None else f"{b['mean']:.9g}"])


# ---------------------------------------------------------------------------
# slices


def export_slice(
    sdf_query: SdfQuery,
    height: float,
    bounds,
    resolution: float,
    path_prefix: str | Path,
    value_range: float | None = None,
) -> np.ndarray:
    """Sample a constant-z slice on a regular xy grid and write it as ``.csv`` and ``.pgm`` plus a ``.txt`` sidecar.

    CSV: one row per y (ascending), one column per x (ascending), values in
    metres. PGM: 8-bit, gray = round(255 * (v + r) / (2 r)) clipped, with
    r = ``value_range`` (default max |v|); the ``.txt`` sidecar records the
    grid origin and resolution together with r.
    """
    bmin, bmax = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    if not (bmin[2] <= height <= bmax[2]):
        raise ValueError("slice height outside bounds")
    nx = int(np.ceil((bmax[0] - bmin[0]) / resolution))
    ny = int(np.ceil((bmax[1] - bmin[1]) / resolution))
    xs = bmin[0] + (np.arange(nx) + 0.5) * resolution
    ys = bmin[1] + (np.arange(ny) + 0.5) * resolution
    X, Y = np.meshgrid(xs, ys)
    pts = np.stack([X.ravel(), Y.ravel(), np.full(X.size, height)], axis=1)
    vals = np.asarray(sdf_query(pts), dtype=np.float64).reshape(ny, nx)
    prefix = Path(path_prefix)
    np.savetxt(prefix.with_suffix(".csv"), vals, delimiter=",", fmt="%.6f")
    r = float(value_range) if value_range else float(np.nanmax(np.abs(vals)) or 1.0)
    gray = np.clip(np.rint(255 * (vals + r) / (2 * r)), 0, 255).astype(np.uint8)
    with open(prefix.with_suffix(".pgm"), "wb") as fh:
        fh.write(f"P5\n{nx} {ny}\n255\n".encode())
        fh.write(gray[::-1].tobytes())  # image rows top-down = y descending
    prefix.with_suffix(".txt").write_text(
        f"height={height!r}\nx0={xs[0]!r}\ny0={ys[0]!r}\nresolution={resolution!r}\n"
        f"nx={nx}\nny={ny}\nvalue_min={-r!r}\nvalue_max={r!r}\n"
        "mapping=gray=round(255*(v-value_min)/(value_max-value_min))\n"
    )
    return vals


# ---------------------------------------------------------------------------
# meshes


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int, counter-clockwise seen from the +grad side

    def __len__(self) -> int:
        return len(self.faces)


def sample_grid(sdf_query: SdfQuery, bounds, resolution: float, chunk: int = 200_000):
    bmin, bmax = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    dims = np.floor((bmax - bmin) / resolution + 1e-9).astype(int) + 1
    axes = [bmin[i] + np.arange(dims[i]) * resolution for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.concatenate([np.asarray(sdf_query(pts[i : i + chunk]), float) for i in range(0, len(pts), chunk)])
    return vals.reshape(tuple(dims)), bmin


def marching_cubes(
    sdf_query: SdfQuery | None,
    bounds,
    resolution: float,
    volume: np.ndarray | None = None,
    close_boundary: bool = False,
) -> Mesh:
    """Zero level set of a sampled field, triangles wound so normals follow +grad f.

    ``close_boundary`` treats everything outside the sampled box as solid so
    that surfaces cut by the box are capped.
    """
    from skimage.measure import marching_cubes as _mc

    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if volume is None:
        volume, origin = sample_grid(sdf_query, bounds, resolution)
    else:
        origin = np.asarray(bounds[0], float)
    if close_boundary:
        volume = np.pad(volume, 1, constant_values=-resolution)
        origin = origin - resolution
    if not (np.nanmin(volume) < 0 < np.nanmax(volume)):
        log.warning("field has no zero crossing inside bounds; mesh is empty")
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = _mc(volume, level=0.0, spacing=(resolution,) * 3, allow_degenerate=False)
    verts = verts + origin
    faces = faces.astype(np.int64)
    # orient every face so its normal agrees with the field gradient
    tri = verts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    g = _volume_gradient(volume, origin, resolution, tri.mean(axis=1))
    flip = np.einsum("ij,ij->i", n, g) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return Mesh(verts, faces)


def _volume_gradient(volume, origin, h, pts):
    from .voxel import VoxelGrid, query

    grid = VoxelGrid(origin, h, volume.astype(np.float64), "sdf")
    return query(grid, pts, grad_step=h / 2)[1]


def write_ply(path: str | Path, mesh: Mesh) -> None:
    """ASCII PLY: ``vertex`` (float x, y, z) and ``face`` (uchar count, int indices)."""
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\nproperty float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {len(mesh.faces)}\nproperty list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def read_ply(path: str | Path) -> Mesh:
    with open(path) as fh:
        lines = fh.read().splitlines()
    end = lines.index("end_header")
    nv = nf = 0
    for ln in lines[:end]:
        if ln.startswith("element vertex"):
            nv = int(ln.split()[-1])
        elif ln.startswith("element face"):
            nf = int(ln.split()[-1])
    body = lines[end + 1 :]
    verts = np.array([[float(t) for t in ln.split()] for ln in body[:nv]]).reshape(-1, 3)
    faces = np.array([[int(t) for t in ln.split()[1:4]] for ln in body[nv : nv + nf]], dtype=np.int64).reshape(-1, 3)
    return Mesh(verts, faces)


def edge_use_counts(faces: np.ndarray) -> dict[tuple[int, int], int]:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return {tuple(k): int(c) for k, c in zip(uniq, counts)}


def is_watertight(mesh: Mesh) -> bool:
    """Every edge is shared by exactly two faces."""
    if len(mesh.faces) == 0:
        return False
    e = np.sort(np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def euler_characteristic(mesh: Mesh) -> int:
    used = np.unique(mesh.faces)
    e = np.unique(np.sort(np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]]), axis=1), axis=0)
    return len(used) - len(e) + len(mesh.faces)


def connected_components(mesh: Mesh) -> list[np.ndarray]:
    """Face index arrays of the edge-connected components, largest first."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components as _cc

    nv = len(mesh.vertices)
    f = mesh.faces
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nv, nv))
    _, labels = _cc(adj, directed=False)
    face_label = labels[f[:, 0]]
    comps = [np.nonzero(face_label == lab)[0] for lab in np.unique(face_label)]
    return sorted(comps, key=len, reverse=True)


def submesh(mesh: Mesh, face_idx: np.ndarray) -> Mesh:
    return Mesh(mesh.vertices, mesh.faces[face_idx])


# ---------------------------------------------------------------------------
# queryable fields


class NeuralField:
    def __init__(self, params, basis):
        self.params, self.basis = params, basis

    def query(self, x: np.ndarray):
        from .network import forward_chunked

        f, g = forward_chunked(self.params, self.basis, x, with_grad=True)
        return f.astype(np.float64), g.astype(np.float64), np.ones(len(f), dtype=bool)

    def sdf(self, x: np.ndarray) -> np.ndarray:
        from .network import forward_chunked

        return forward_chunked(self.params, self.basis, x).astype(np.float64)


class GridField:
    """Trilinear voxel field; points outside the grid or in unobserved voxels are unmapped."""

    def __init__(self, grid, grad_step: float | None = None):
        self.grid, self.grad_step = grid, grad_step

    def query(self, x: np.ndarray):
        from .voxel import observed_at, query

        v, g, inside = query(self.grid, x, self.grad_step)
        return v, g, inside & observed_at(self.grid, x)

    def sdf(self, x: np.ndarray) -> np.ndarray:
        from .voxel import trilinear

        return trilinear(self.grid, x)[0]


class SceneField:
    def __init__(self, scene):
        self.scene = scene

    def query(self, x: np.ndarray):
        s, g = self.scene.sdf_grad(x)
        return s, g, np.ones(len(s), dtype=bool)

    def sdf(self, x: np.ndarray) -> np.ndarray:
        return self.scene.sdf(x)


def evaluate_field(points: EvalPointSet, field, label: str = "", eps: float = 2.0) -> MetricReport:
    pred, grad, mapped = field.query(points.points)
    return evaluate(points, pred, grad, mapped, eps, label)
