"""Voxel-grid SDF baseline: projective occupancy fusion, separable exact
Euclidean distance transform (lower envelope of parabolas), signed fields,
trilinear queries, and ground-truth SDF grids."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .geometry import DepthFrame, project

# ---------------------------------------------------------------------------
# grid container


PAYLOAD_KINDS = {"occupancy": 0, "sqdist": 1, "sdf": 2}


@dataclass
class VoxelGrid:
    """Scalar payload on voxel centres; centre (i, j, k) sits at origin + (i, j, k) * voxel_size.

    ``payload`` is indexed [ix, iy, iz].
    """

    origin: np.ndarray
    voxel_size: float
    payload: np.ndarray
    kind: str = "sdf"
    observed: np.ndarray | None = None  # voxels touched by at least one measurement

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.payload.ndim != 3 or min(self.payload.shape) < 1:
            raise ValueError("payload must be a non-empty 3-D array")
        if self.kind not in PAYLOAD_KINDS:
            raise ValueError(f"unknown payload kind {self.kind}")

    @classmethod
    def covering(cls, bmin, bmax, voxel_size: float, margin: float = 0.0, kind: str = "occupancy", fill=0):
        bmin = np.asarray(bmin, float) - margin
        bmax = np.asarray(bmax, float) + margin
        dims = np.ceil((bmax - bmin) / voxel_size).astype(int) + 1
        dtype = np.uint8 if kind == "occupancy" else np.float64
        origin = bmin
        return cls(origin, voxel_size, np.full(tuple(dims), fill, dtype=dtype), kind)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.payload.shape

    def centers(self) -> np.ndarray:
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + idx * self.voxel_size

    def world_to_index(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.origin) / self.voxel_size

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin, self.origin + (np.array(self.dims) - 1) * self.voxel_size


# ---------------------------------------------------------------------------
# exact EDT


@njit(cache=True)
def _edt_1d_inplace(f, d, v, z):
    """Lower envelope of parabolas (Felzenszwalb & Huttenlocher) on one row.

    f: input squared distances (+inf allowed), d: output; v, z: scratch.
    """
    n = f.shape[0]
    k = -1
    for q in range(n):
        if f[q] == np.inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * q - 2.0 * p)
            if s <= z[k]:
                k -= 1
                if k < 0:
                    break
            else:
                break
        k += 1
        v[k] = q
        if k == 0:
            z[0] = -np.inf
        else:
            z[k] = s
        z[k + 1] = np.inf
    if k < 0:
        for q in range(n):
            d[q] = np.inf
        return
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        d[q] = (q - p) * (q - p) + f[p]


@njit(cache=True)
def _edt_axis0(a):
    """Apply the 1-D transform along axis 0 of a C-contiguous (n, m) array."""
    n, m = a.shape
    out = np.empty_like(a)
    f = np.empty(n)
    d = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    for j in range(m):
        for i in range(n):
            f[i] = a[i, j]
        _edt_1d_inplace(f, d, v, z)
        for i in range(n):
            out[i, j] = d[i]
    return out


def edt_1d(row) -> np.ndarray:
    """Exact 1-D squared distance transform of a row of squared distances."""
    f = np.asarray(row, dtype=np.float64)
    return _edt_axis0(np.ascontiguousarray(f.reshape(-1, 1)))[:, 0]


def squared_edt(f: np.ndarray) -> np.ndarray:
    """Separable squared EDT of an N-D array of squared distances (voxel^2 units)."""
    out = np.asarray(f, dtype=np.float64)
    for axis in range(out.ndim):
        moved = np.moveaxis(out, axis, 0)
        shape = moved.shape
        res = _edt_axis0(np.ascontiguousarray(moved.reshape(shape[0], -1)))
        out = np.moveaxis(res.reshape(shape), 0, axis)
    return np.ascontiguousarray(out)


def edt_3d(seeds: np.ndarray, voxel_size: float = 1.0) -> np.ndarray:
    """Euclidean distance (metres) from every voxel centre to the nearest seed.

    With no seeds the result is +inf everywhere.
    """
    seeds = np.asarray(seeds, dtype=bool)
    f = np.where(seeds, 0.0, np.inf)
    return np.sqrt(squared_edt(f)) * voxel_size


def signed_field(occ: np.ndarray, voxel_size: float = 1.0) -> np.ndarray:
    """Distance to occupied minus distance to free; negative inside occupied regions.

    Raises for all-occupied or all-free grids, where one side is undefined.
    """
    occ = np.asarray(occ, dtype=bool)
    if occ.all() or not occ.any():
        raise ValueError("degenerate occupancy grid: needs both occupied and free voxels")
    return edt_3d(occ, voxel_size) - edt_3d(~occ, voxel_size)


# ---------------------------------------------------------------------------
# queries


def trilinear(grid: VoxelGrid, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Interpolate the payload at world points; returns (values, in_bounds)."""
    c = grid.world_to_index(np.asarray(x).reshape(-1, 3))
    dims = np.array(grid.dims)
    inside = np.all((c >= 0) & (c <= dims - 1), axis=1)
    c = np.clip(c, 0, dims - 1)
    i0 = np.minimum(np.floor(c).astype(np.int64), np.maximum(dims - 2, 0))
    t = c - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    P = grid.payload
    out = np.zeros(len(c))
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1 - t[:, 0]
        ix = i1[:, 0] if dx else i0[:, 0]
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1 - t[:, 1]
            iy = i1[:, 1] if dy else i0[:, 1]
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1 - t[:, 2]
                iz = i1[:, 2] if dz else i0[:, 2]
                w = wx * wy * wz
                # skip zero weights so infinities in unused corners don't poison the result
                out += np.where(w > 0, w * P[ix, iy, iz], 0.0)
    return out, inside


def query(grid: VoxelGrid, x: np.ndarray, grad_step: float | None = None):
    """Trilinear value, central-difference gradient and in-bounds flag."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    h = grid.voxel_size if grad_step is None else grad_step
    val, inside = trilinear(grid, x)
    g = np.empty_like(x)
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        g[:, a] = (trilinear(grid, x + e)[0] - trilinear(grid, x - e)[0]) / (2 * h)
    return val, g, inside


def observed_at(grid: VoxelGrid, x: np.ndarray) -> np.ndarray:
    """True where the nearest voxel has been touched by a measurement."""
    if grid.observed is None:
        return np.ones(len(x), dtype=bool)
    c = np.rint(grid.world_to_index(np.asarray(x).reshape(-1, 3))).astype(np.int64)
    dims = np.array(grid.dims)
    inside = np.all((c >= 0) & (c < dims), axis=1)
    c = np.clip(c, 0, dims - 1)
    return inside & grid.observed[c[:, 0], c[:, 1], c[:, 2]]


# ---------------------------------------------------------------------------
# fusion


@dataclass
class FusionConfig:
    voxel_size: float = 0.07
    half_band: float | None = None  # default voxel_size / 2
    margin: float = 0.5
    mode: str = "latest"  # or "logodds"
    logodds_hit: float = 0.85
    logodds_miss: float = -0.4

    @property
    def band(self) -> float:
        return self.voxel_size / 2 if self.half_band is None else self.half_band


@dataclass
class OccupancyFusion:
    """Projective occupancy fusion with all voxels initialised unoccupied."""

    grid: VoxelGrid
    cfg: FusionConfig
    observed: np.ndarray = field(init=False)
    logodds: np.ndarray | None = field(init=False, default=None)
    _centers: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.observed = np.zeros(self.grid.dims, dtype=bool)
        self._centers = self.grid.centers()
        if self.cfg.mode == "logodds":
            self.logodds = np.zeros(self.grid.dims)
        elif self.cfg.mode != "latest":
            raise ValueError(f"unknown fusion mode {self.cfg.mode}")

    @classmethod
    def for_bounds(cls, bmin, bmax, cfg: FusionConfig | None = None) -> "OccupancyFusion":
        cfg = cfg or FusionConfig()
        return cls(VoxelGrid.covering(bmin, bmax, cfg.voxel_size, cfg.margin, "occupancy", 0), cfg)

    def fuse(self, frame: DepthFrame) -> None:
        fuse_frame(self, frame)

    def occupancy(self) -> np.ndarray:
        if self.logodds is not None:
            return self.logodds > 0
        return self.grid.payload.astype(bool)

    def sdf_grid(self) -> VoxelGrid:
        sdf = signed_field(self.occupancy(), self.grid.voxel_size)
        return VoxelGrid(self.grid.origin, self.grid.voxel_size, sdf, "sdf", observed=self.observed.copy())


def fuse_frame(fusion: OccupancyFusion, frame: DepthFrame) -> None:
    """Update occupancy from one frame: occupied within the band around the
    measured depth, free in front of it, untouched behind it or outside the frustum."""
    intr = frame.intrinsics
    u, v, z = project(intr, frame.pose, fusion._centers)
    with np.errstate(invalid="ignore"):
        ui = np.rint(u)
        vi = np.rint(v)
        inview = (z > 0) & (ui >= 0) & (ui <= intr.width - 1) & (vi >= 0) & (vi <= intr.height - 1)
    idx = np.nonzero(inview)[0]
    D = frame.depth[vi[idx].astype(int), ui[idx].astype(int)]
    ok = np.isfinite(D)
    idx, D = idx[ok], D[ok]
    zz = z[idx]
    h = fusion.cfg.band
    occ = np.abs(zz - D) <= h
    free = zz < D - h
    flat_obs = fusion.observed.reshape(-1)
    if fusion.logodds is not None:
        lo = fusion.logodds.reshape(-1)
        lo[idx[occ]] += fusion.cfg.logodds_hit
        lo[idx[free]] += fusion.cfg.logodds_miss
    else:
        flat = fusion.grid.payload.reshape(-1)
        flat[idx[occ]] = 1
        flat[idx[free]] = 0
    flat_obs[idx[occ | free]] = True


# ---------------------------------------------------------------------------
# grid files
#
# little-endian: magic b"SDFGRID1" | u32 kind | u32 nx, ny, nz | f64 origin[3] |
# f64 voxel_size | u32 dtype code (0=u8, 1=f32, 2=f64) | payload in z-major
# order (x varies fastest, z slowest) | optional b"OBSV" + u8 observed mask
# in the same order.

GRID_MAGIC = b"SDFGRID1"
_GRID_DTYPES = {0: np.dtype("u1"), 1: np.dtype("<f4"), 2: np.dtype("<f8")}


def save_grid(path: str | Path, grid: VoxelGrid) -> None:
    code = {np.dtype("u1"): 0, np.dtype("<f4"): 1, np.dtype("<f8"): 2}[np.dtype(grid.payload.dtype).newbyteorder("<")]
    head = GRID_MAGIC + struct.pack("<4I", PAYLOAD_KINDS[grid.kind], *grid.dims)
    head += struct.pack("<4d", *grid.origin, grid.voxel_size) + struct.pack("<I", code)
    body = np.ascontiguousarray(grid.payload.transpose(2, 1, 0), dtype=_GRID_DTYPES[code]).tobytes()
    if grid.observed is not None:
        body += b"OBSV" + np.ascontiguousarray(grid.observed.transpose(2, 1, 0), dtype=np.uint8).tobytes()
    Path(path).write_bytes(head + body)


def load_grid(path: str | Path) -> VoxelGrid:
    raw = Path(path).read_bytes()
    if raw[:8] != GRID_MAGIC:
        raise ValueError(f"{path}: not a voxel grid file")
    kind_code, nx, ny, nz = struct.unpack_from("<4I", raw, 8)
    ox, oy, oz, vs = struct.unpack_from("<4d", raw, 24)
    (code,) = struct.unpack_from("<I", raw, 56)
    dt = _GRID_DTYPES[code]
    count = nx * ny * nz
    end = 60 + count * dt.itemsize
    observed = None
    if len(raw) == end + 4 + count and raw[end : end + 4] == b"OBSV":
        obs = np.frombuffer(raw, dtype=np.uint8, count=count, offset=end + 4)
        observed = np.ascontiguousarray(obs.reshape(nz, ny, nx).transpose(2, 1, 0)).astype(bool)
    elif len(raw) != end:
        raise ValueError(f"{path}: payload size mismatch")
    data = np.frombuffer(raw, dtype=dt, count=count, offset=60).reshape(nz, ny, nx).transpose(2, 1, 0)
    kind = {v: k for k, v in PAYLOAD_KINDS.items()}[kind_code]
    payload = np.ascontiguousarray(data).astype(dt.newbyteorder("="))
    return VoxelGrid(np.array([ox, oy, oz]), vs, payload, kind, observed=observed)


# ---------------------------------------------------------------------------
# ground truth


def gt_sdf_grid(source, resolution: float = 0.01, bounds=None, margin: float = 0.0, chunk: int = 2_000_000) -> VoxelGrid:
    """Ground-truth SDF on voxel centres.

    ``source`` is either a scene with ``sdf`` (evaluated directly) or a
    ``(vertices, faces)`` triangle mesh (voxelised by ray parity, then
    ``signed_field``). ``bounds`` defaults to the scene bounds / mesh AABB.
    """
    if hasattr(source, "sdf"):
        bmin, bmax = (source.bounds_min, source.bounds_max) if bounds is None else bounds
        grid = VoxelGrid.covering(bmin, bmax, resolution, margin, "sdf", 0.0)
        grid.payload = grid.payload.astype(np.float32)
        flat = grid.payload.reshape(-1)
        dims = grid.dims
        n = flat.size
        for s in range(0, n, chunk):
            idx = np.arange(s, min(n, s + chunk))
            ijk = np.stack(np.unravel_index(idx, dims), axis=1)
            flat[idx] = source.sdf(grid.origin + ijk * resolution)
        return grid
    verts, faces = source
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if bounds is None:
        bounds = (verts.min(0), verts.max(0))
    grid = VoxelGrid.covering(bounds[0], bounds[1], resolution, margin if margin else 2 * resolution, "sdf", 0.0)
    occ = voxelize_mesh(verts, faces, grid)
    grid.payload = signed_field(occ, resolution)
    return grid


@njit(cache=True)
def _parity_hits(tri, y0, z0, h, ny, nz):
    """x-coordinates where +x lines through (y0 + j h, z0 + k h) cross each triangle."""
    max_hits = 64 * ny * nz + 1024
    cols = np.empty(max_hits, dtype=np.int64)
    xs = np.empty(max_hits)
    n = 0
    for t in range(tri.shape[0]):
        a = tri[t, 0]
        b = tri[t, 1]
        c = tri[t, 2]
        ymin = min(a[1], b[1], c[1])
        ymax = max(a[1], b[1], c[1])
        zmin = min(a[2], b[2], c[2])
        zmax = max(a[2], b[2], c[2])
        j0 = max(0, int(np.ceil((ymin - y0) / h)))
        j1 = min(ny - 1, int(np.floor((ymax - y0) / h)))
        k0 = max(0, int(np.ceil((zmin - z0) / h)))
        k1 = min(nz - 1, int(np.floor((zmax - z0) / h)))
        for j in range(j0, j1 + 1):
            py = y0 + j * h
            for k in range(k0, k1 + 1):
                pz = z0 + k * h
                # signed areas in the yz projection; half-open rule avoids double counting shared edges
                w0 = (b[1] - py) * (c[2] - pz) - (b[2] - pz) * (c[1] - py)
                w1 = (c[1] - py) * (a[2] - pz) - (c[2] - pz) * (a[1] - py)
                w2 = (a[1] - py) * (b[2] - pz) - (a[2] - pz) * (b[1] - py)
                if (w0 >= 0 and w1 >= 0 and w2 >= 0) or (w0 <= 0 and w1 <= 0 and w2 <= 0):
                    area = w0 + w1 + w2
                    if area == 0:
                        continue
                    if w0 == 0 or w1 == 0 or w2 == 0:
                        # on an edge: nudge the test point to break the tie consistently
                        py2 = py + 1e-7 * h
                        pz2 = pz + 1.3e-7 * h
                        w0 = (b[1] - py2) * (c[2] - pz2) - (b[2] - pz2) * (c[1] - py2)
                        w1 = (c[1] - py2) * (a[2] - pz2) - (c[2] - pz2) * (a[1] - py2)
                        w2 = (a[1] - py2) * (b[2] - pz2) - (a[2] - pz2) * (b[1] - py2)
                        if not ((w0 > 0 and w1 > 0 and w2 > 0) or (w0 < 0 and w1 < 0 and w2 < 0)):
                            continue
                        area = w0 + w1 + w2
                    x = (w0 * a[0] + w1 * b[0] + w2 * c[0]) / area
                    if n >= max_hits:
                        return cols[:n], xs[:n]
                    cols[n] = j * nz + k
                    xs[n] = x
                    n += 1
    return cols[:n], xs[:n]


def voxelize_mesh(verts: np.ndarray, faces: np.ndarray, grid: VoxelGrid) -> np.ndarray:
    """Occupancy by ray parity along +x through every voxel centre."""
    tri = verts[faces]
    nx, ny, nz = grid.dims
    h = grid.voxel_size
    cols, xs = _parity_hits(tri, grid.origin[1], grid.origin[2], h, ny, nz)
    occ = np.zeros((nx, ny, nz), dtype=bool)
    xc = grid.origin[0] + np.arange(nx) * h
    order = np.lexsort((xs, cols))
    cols, xs = cols[order], xs[order]
    starts = np.searchsorted(cols, np.arange(ny * nz), side="left")
    ends = np.searchsorted(cols, np.arange(ny * nz), side="right")
    for col in np.nonzero(ends > starts)[0]:
        hits = xs[starts[col] : ends[col]]
        count = np.searchsorted(hits, xc, side="left")
        j, k = divmod(col, nz)
        occ[:, j, k] = (count % 2) == 1
    return occ
