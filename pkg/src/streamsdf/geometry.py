"""Pinhole camera, depth frames, ray back-projection and per-frame sampling."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform T_WC (OpenCV camera axes: x right, y down, z forward)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("rotation is not in SO(3)")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64).reshape(4, 4)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        eye = np.asarray(eye, float)
        z = np.asarray(target, float) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, float))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls(np.stack([x, y, z], axis=1), eye)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, pts_cam: np.ndarray) -> np.ndarray:
        return pts_cam @ self.rotation.T + self.translation

    def inverse_apply(self, pts_world: np.ndarray) -> np.ndarray:
        return (pts_world - self.translation) @ self.rotation


@dataclass
class DepthFrame:
    depth: np.ndarray  # (H, W) metres, NaN = invalid
    pose: Pose
    intrinsics: Intrinsics
    frame_id: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        d = np.array(self.depth, dtype=np.float64)
        if d.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError(f"depth shape {d.shape} does not match intrinsics")
        d[~(np.isfinite(d) & (d > 0))] = np.nan
        self.depth = d

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth)


def pixel_rays(intr: Intrinsics, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Camera-frame rays with unit z component for pixel coordinates."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def backproject(intr: Intrinsics, pose: Pose, u, v) -> tuple[np.ndarray, np.ndarray]:
    """Return (ray_cam with z = 1, unit world ray direction) for pixel (u, v)."""
    u_arr, v_arr = np.asarray(u), np.asarray(v)
    if np.any((u_arr < 0) | (u_arr > intr.width - 1) | (v_arr < 0) | (v_arr > intr.height - 1)):
        raise IndexError("pixel outside image bounds")
    ray_cam = pixel_rays(intr, u_arr, v_arr)
    ray_world = ray_cam @ pose.rotation.T
    ray_world = ray_world / np.linalg.norm(ray_world, axis=-1, keepdims=True)
    return ray_cam, ray_world


def project(intr: Intrinsics, pose: Pose, pts_world: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World points -> (u, v, z-depth)."""
    pc = pose.inverse_apply(np.asarray(pts_world, dtype=np.float64))
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pc[..., 0] / z + intr.cx
        v = intr.fy * pc[..., 1] / z + intr.cy
    return u, v, z


def frame_points(frame: DepthFrame) -> np.ndarray:
    """World-space point for every pixel (NaN where depth is invalid)."""
    intr = frame.intrinsics
    v, u = np.mgrid[0 : intr.height, 0 : intr.width]
    rays = pixel_rays(intr, u, v)
    return frame.pose.apply(rays * frame.depth[..., None])


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class DepthSamplingConfig:
    n_stratified: int = 20
    n_gaussian: int = 8
    d_min: float = 0.07
    delta: float = 0.10
    sigma: float = 0.10


def sample_pixels(frame: DepthFrame, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` pixels (u, v) drawn uniformly with replacement from the valid-depth pixels."""
    if n < 1:
        raise ValueError("n must be >= 1")
    vv, uu = np.nonzero(frame.valid)
    if len(uu) == 0:
        raise ValueError(f"frame {frame.frame_id} has no valid depth pixels")
    idx = rng.integers(0, len(uu), size=n)
    return np.stack([uu[idx], vv[idx]], axis=1)


def sample_depths(D_uv, cfg: DepthSamplingConfig, rng: np.random.Generator, include_surface: bool = True) -> np.ndarray:
    """Depths along rays with measured depth ``D_uv`` (scalar or (R,)).

    Returns (R, N + M + 1): one jittered draw per stratified bin over
    [d_min, D + delta], M Gaussian draws around D clamped to the same interval,
    and finally D itself (omitted when ``include_surface`` is False).
    Rays with D <= d_min yield NaN rows; callers drop them.
    """
    D = np.atleast_1d(np.asarray(D_uv, dtype=np.float64))
    R = len(D)
    hi = D + cfg.delta
    width = (hi - cfg.d_min) / cfg.n_stratified
    k = np.arange(cfg.n_stratified)
    strat = cfg.d_min + (k[None, :] + rng.random((R, cfg.n_stratified))) * width[:, None]
    # guard against rounding onto the open upper edge of the last bin
    strat = np.minimum(strat, np.nextafter(cfg.d_min + (k[None, :] + 1) * width[:, None], -np.inf))
    gauss = D[:, None] + cfg.sigma * rng.standard_normal((R, cfg.n_gaussian))
    gauss = np.clip(gauss, cfg.d_min, hi[:, None])
    cols = [strat, gauss]
    if include_surface:
        cols.append(D[:, None])
    out = np.concatenate(cols, axis=1)
    out[D <= cfg.d_min] = np.nan
    return out


def surface_normals(frame: DepthFrame, max_jump: float = 0.10) -> np.ndarray:
    """Per-pixel world-frame unit normals facing the camera; NaN where invalid.

    Central differences of back-projected neighbours; pixels on the border,
    next to invalid depth, or across a depth jump larger than ``max_jump``
    are invalidated.
    """
    P = frame_points(frame)
    D = frame.depth
    H, W = D.shape
    normals = np.full((H, W, 3), np.nan)
    if H < 3 or W < 3:
        return normals
    du = P[1:-1, 2:] - P[1:-1, :-2]
    dv = P[2:, 1:-1] - P[:-2, 1:-1]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm
    c = D[1:-1, 1:-1]
    jumps = np.stack(
        [np.abs(D[1:-1, 2:] - c), np.abs(D[1:-1, :-2] - c), np.abs(D[2:, 1:-1] - c), np.abs(D[:-2, 1:-1] - c)]
    )
    with np.errstate(invalid="ignore"):
        ok = np.all(jumps <= max_jump, axis=0) & (norm[..., 0] > 0)
    view = P[1:-1, 1:-1] - frame.pose.translation
    flip = np.einsum("ijk,ijk->ij", n, view) > 0
    n[flip] *= -1
    n[~ok] = np.nan
    normals[1:-1, 1:-1] = n
    return normals


@dataclass
class SampleBatch:
    """Structure-of-arrays batch of query points along back-projected rays."""

    points: np.ndarray  # (N, 3) world
    ray_dirs: np.ndarray  # (N, 3) unit world ray directions
    depth: np.ndarray  # (N,) z-depth d of the sample
    measured: np.ndarray  # (N,) measured depth D[u, v]
    surface_points: np.ndarray  # (N, 3) ray-surface intersection D[u, v] * r
    frame_ids: np.ndarray  # (N,) int
    slots: np.ndarray  # (N,) index of the selected-frame slot that produced the sample
    pixels: np.ndarray  # (N, 2) int (u, v)
    is_surface: np.ndarray  # (N,) bool, d == D[u, v]
    normals: np.ndarray  # (N, 3) world normal at the pixel, NaN if unavailable
    bounds: np.ndarray | None = None  # (N,) signed bound b
    approx_grad: np.ndarray | None = None  # (N, 3) g, zero where unavailable
    diagnostics: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.depth)

    @property
    def depth_gap(self) -> np.ndarray:
        """Signed z-depth gap D - d (positive in front of the surface)."""
        return self.measured - self.depth

    def surface_index(self) -> np.ndarray:
        return np.nonzero(self.is_surface)[0]

    def take(self, idx) -> "SampleBatch":
        kw = {}
        for name in (
            "points", "ray_dirs", "depth", "measured", "surface_points", "frame_ids",
            "slots", "pixels", "is_surface", "normals", "bounds", "approx_grad",
        ):
            val = getattr(self, name)
            kw[name] = None if val is None else val[idx]
        return SampleBatch(**kw)

    @staticmethod
    def concat(batches: list["SampleBatch"]) -> "SampleBatch":
        kw = {}
        for name in (
            "points", "ray_dirs", "depth", "measured", "surface_points", "frame_ids",
            "slots", "pixels", "is_surface", "normals",
        ):
            kw[name] = np.concatenate([getattr(b, name) for b in batches])
        return SampleBatch(**kw)

    def with_supervision(self, bounds: np.ndarray, approx_grad: np.ndarray, **diag) -> "SampleBatch":
        return replace(self, bounds=bounds, approx_grad=approx_grad, diagnostics=dict(diag))


def sample_frame(
    frame: DepthFrame,
    n_rays: int,
    cfg: DepthSamplingConfig,
    rng: np.random.Generator,
    normals: np.ndarray | None = None,
    slot: int = 0,
    include_surface: bool = True,
) -> SampleBatch:
    """Pixels then depths for one frame, flattened ray-major."""
    pix = sample_pixels(frame, n_rays, rng)
    u, v = pix[:, 0], pix[:, 1]
    D = frame.depth[v, u]
    depths = sample_depths(D, cfg, rng, include_surface=include_surface)
    keep = D > cfg.d_min
    pix, D, depths = pix[keep], D[keep], depths[keep]
    S = depths.shape[1]
    ray_cam, ray_world = backproject(frame.intrinsics, frame.pose, pix[:, 0], pix[:, 1])
    pose = frame.pose
    pts = pose.apply((ray_cam[:, None, :] * depths[..., None]).reshape(-1, 3))
    surf = pose.apply(ray_cam * D[:, None])
    is_surface = np.zeros(depths.shape, dtype=bool)
    if include_surface:
        is_surface[:, -1] = True
    if normals is None:
        nrm = np.full((len(pix), 3), np.nan)
    else:
        nrm = normals[pix[:, 1], pix[:, 0]]
    rep = lambda a: np.repeat(a, S, axis=0)  # noqa: E731
    n = depths.size
    return SampleBatch(
        points=pts,
        ray_dirs=rep(ray_world),
        depth=depths.reshape(-1),
        measured=rep(D),
        surface_points=rep(surf),
        frame_ids=np.full(n, frame.frame_id, dtype=np.int64),
        slots=np.full(n, slot, dtype=np.int64),
        pixels=rep(pix),
        is_surface=is_surface.reshape(-1),
        normals=rep(nrm),
    )
