"""Analytic scenes with exact signed distance, sphere-traced depth rendering,
synthetic camera trajectories and a parametric depth-noise model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DepthFrame, Intrinsics, Pose, pixel_rays

# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    def sdf_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = x - np.asarray(self.center)
        n = np.linalg.norm(d, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            g = d / n[..., None]
        g[n == 0] = (1.0, 0.0, 0.0)
        return n - self.radius, g


def _box_sdf_grad(x, center, half):
    p = x - np.asarray(center)
    q = np.abs(p) - np.asarray(half)
    qpos = np.maximum(q, 0.0)
    outside_len = np.linalg.norm(qpos, axis=-1)
    qmax = q.max(axis=-1)
    inside = np.minimum(qmax, 0.0)
    sdf = outside_len + inside
    sgn = np.where(p >= 0, 1.0, -1.0)
    g = np.zeros_like(p)
    out = outside_len > 0
    g[out] = sgn[out] * qpos[out] / outside_len[out, None]
    ins = ~out
    if ins.any():
        axis = np.argmax(q[ins], axis=-1)
        gi = np.zeros((ins.sum(), 3))
        gi[np.arange(len(axis)), axis] = sgn[ins][np.arange(len(axis)), axis]
        g[ins] = gi
    return sdf, g


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half: tuple[float, float, float]

    def __post_init__(self):
        if min(self.half) <= 0:
            raise ValueError("box half-extents must be positive")

    def sdf_grad(self, x):
        return _box_sdf_grad(x, self.center, self.half)


@dataclass(frozen=True)
class RoomShell:
    """Inside-out box: free space inside, walls/floor/ceiling are the surface."""

    center: tuple[float, float, float]
    half: tuple[float, float, float]

    def __post_init__(self):
        if min(self.half) <= 0:
            raise ValueError("room half-extents must be positive")

    def sdf_grad(self, x):
        s, g = _box_sdf_grad(x, self.center, self.half)
        return -s, -g


@dataclass(frozen=True)
class Plane:
    """Half-space n . x <= offset is solid; free side is n . x > offset."""

    normal: tuple[float, float, float]
    offset: float

    def __post_init__(self):
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")

    def sdf_grad(self, x):
        n = np.asarray(self.normal, dtype=np.float64)
        return x @ n - self.offset, np.broadcast_to(n, x.shape).copy()


Primitive = Sphere | Box | RoomShell | Plane


@dataclass
class Scene:
    primitives: list
    bounds_min: np.ndarray = field(default_factory=lambda: np.full(3, -1.0))
    bounds_max: np.ndarray = field(default_factory=lambda: np.full(3, 1.0))

    def __post_init__(self):
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64)

    def sdf_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Min-composition; gradient of the active primitive (lowest index on ties)."""
        x = np.asarray(x, dtype=np.float64)
        shape = x.shape[:-1]
        x = x.reshape(-1, 3)
        best = np.full(len(x), np.inf)
        grad = np.zeros((len(x), 3))
        for prim in self.primitives:
            s, g = prim.sdf_grad(x)
            better = s < best
            best = np.where(better, s, best)
            grad[better] = g[better]
        return best.reshape(shape), grad.reshape(shape + (3,))

    def sdf(self, x: np.ndarray) -> np.ndarray:
        return self.sdf_grad(x)[0]

    def primitive_sdfs(self, x: np.ndarray) -> np.ndarray:
        """Per-primitive distances, shape (n_points, n_primitives)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        return np.stack([p.sdf_grad(x)[0] for p in self.primitives], axis=1)


def scene_sdf(scene: Scene, x) -> tuple[np.ndarray, np.ndarray]:
    return scene.sdf_grad(x)


def room1() -> Scene:
    """Canonical acceptance scene: a 6 x 4 x 2.5 m room holding a table and a ball, with a small cube on the table."""
    return Scene(
        primitives=[
            RoomShell(center=(0.0, 0.0, 1.25), half=(3.0, 2.0, 1.25)),
            Box(center=(0.0, 0.0, 0.35), half=(0.6, 0.4, 0.35)),
            Sphere(center=(1.8, -1.0, 0.3), radius=0.3),
            Box(center=(0.3, 0.1, 0.75), half=(0.05, 0.05, 0.05)),
        ],
        bounds_min=np.array([-3.0, -2.0, 0.0]),
        bounds_max=np.array([3.0, 2.0, 2.5]),
    )


# ---------------------------------------------------------------------------
# scene description files
#
# One primitive per line, '#' starts a comment:
#   bounds min=x,y,z max=x,y,z
#   sphere center=x,y,z radius=r
#   box center=x,y,z half=hx,hy,hz
#   room center=x,y,z half=hx,hy,hz
#   plane normal=nx,ny,nz offset=o


def _vec(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(","))


def format_scene(scene: Scene) -> str:
    fmt = lambda v: ",".join(repr(float(a)) for a in v)  # noqa: E731
    lines = [f"bounds min={fmt(scene.bounds_min)} max={fmt(scene.bounds_max)}"]
    for p in scene.primitives:
        if isinstance(p, Sphere):
            lines.append(f"sphere center={fmt(p.center)} radius={float(p.radius)!r}")
        elif isinstance(p, RoomShell):
            lines.append(f"room center={fmt(p.center)} half={fmt(p.half)}")
        elif isinstance(p, Box):
            lines.append(f"box center={fmt(p.center)} half={fmt(p.half)}")
        elif isinstance(p, Plane):
            lines.append(f"plane normal={fmt(p.normal)} offset={float(p.offset)!r}")
        else:
            raise TypeError(f"unknown primitive {p!r}")
    return "\n".join(lines) + "\n"


def parse_scene(text: str, source: str = "<scene>") -> Scene:
    prims = []
    bmin, bmax = None, None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *fields = line.split()
        try:
            kv = dict(f.split("=", 1) for f in fields)
            if kind == "bounds":
                bmin, bmax = _vec(kv["min"]), _vec(kv["max"])
            elif kind == "sphere":
                prims.append(Sphere(_vec(kv["center"]), float(kv["radius"])))
            elif kind == "box":
                prims.append(Box(_vec(kv["center"]), _vec(kv["half"])))
            elif kind == "room":
                prims.append(RoomShell(_vec(kv["center"]), _vec(kv["half"])))
            elif kind == "plane":
                prims.append(Plane(_vec(kv["normal"]), float(kv["offset"])))
            else:
                raise ValueError(f"unknown primitive '{kind}'")
        except (KeyError, ValueError) as e:
            raise ValueError(f"{source}:{lineno}: {e}") from None
    if not prims:
        raise ValueError(f"{source}: no primitives")
    if bmin is None:
        raise ValueError(f"{source}: missing bounds line")
    return Scene(prims, np.array(bmin), np.array(bmax))


def load_scene(path: str | Path) -> Scene:
    return parse_scene(Path(path).read_text(), str(path))


def save_scene(path: str | Path, scene: Scene) -> None:
    Path(path).write_text(format_scene(scene))


# ---------------------------------------------------------------------------
# rendering


def render_depth(
    scene: Scene,
    pose: Pose,
    intrinsics: Intrinsics,
    frame_id: int = 0,
    timestamp: float = 0.0,
    max_range: float = 10.0,
    hit_eps: float = 1e-4,
    max_steps: int = 400,
) -> DepthFrame:
    """Sphere-trace every pixel; returns z-depth (NaN for misses)."""
    if scene.sdf(pose.translation[None])[0] <= 0:
        raise ValueError("camera centre is not in free space")
    H, W = intrinsics.height, intrinsics.width
    v, u = np.mgrid[0:H, 0:W]
    rays_cam = pixel_rays(intrinsics, u, v).reshape(-1, 3)
    ray_len = np.linalg.norm(rays_cam, axis=1)
    dirs = (rays_cam / ray_len[:, None]) @ pose.rotation.T
    origin = pose.translation
    t = np.zeros(len(dirs))
    active = np.ones(len(dirs), dtype=bool)
    hit = np.zeros(len(dirs), dtype=bool)
    for _ in range(max_steps):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        s = scene.sdf(origin + t[idx, None] * dirs[idx])
        done = np.abs(s) < hit_eps
        hit[idx[done]] = True
        t[idx] += np.where(done, 0.0, s)
        escaped = (t[idx] > max_range) | (s < -hit_eps)
        active[idx[done | escaped]] = False
    depth = np.where(hit, t / ray_len, np.nan).reshape(H, W)
    return DepthFrame(depth=depth, pose=pose, intrinsics=intrinsics, frame_id=frame_id, timestamp=timestamp)


@dataclass(frozen=True)
class NoiseParams:
    sigma0: float = 0.002  # metres
    sigma2: float = 0.00125  # metres^-1
    quantum: float = 0.001  # metres


def add_depth_noise(frame: DepthFrame, params: NoiseParams, rng: np.random.Generator) -> DepthFrame:
    """Gaussian depth noise with sigma = sigma0 + sigma2 d^2, then quantisation."""
    d = frame.depth
    noise = rng.standard_normal(d.shape) * (params.sigma0 + params.sigma2 * d**2)
    noisy = d + noise
    if params.quantum > 0:
        noisy = np.round(noisy / params.quantum) * params.quantum
    noisy[~np.isfinite(d) | (noisy <= 0)] = np.nan
    return DepthFrame(depth=noisy, pose=frame.pose, intrinsics=frame.intrinsics, frame_id=frame.frame_id, timestamp=frame.timestamp)


# ---------------------------------------------------------------------------
# trajectories


def default_intrinsics() -> Intrinsics:
    return Intrinsics(fx=120.0, fy=120.0, cx=79.5, cy=59.5, width=160, height=120)


def _check_clearance(scene: Scene, centers: np.ndarray, clearance: float) -> None:
    s = scene.sdf(centers)
    bad = np.nonzero(s <= clearance)[0]
    if len(bad):
        raise ValueError(f"camera position {centers[bad[0]].round(3).tolist()} is within {clearance} m of geometry")


def orbit_trajectory(
    scene: Scene,
    n_frames: int,
    radius: float = 1.4,
    height: float = 1.4,
    center=None,
    look_height: float = 0.4,
    clearance: float = 0.1,
) -> list[Pose]:
    """Camera on a horizontal circle looking in at the scene centre."""
    c = np.asarray(center if center is not None else (scene.bounds_min + scene.bounds_max) / 2, dtype=np.float64)
    theta = 2 * np.pi * np.arange(n_frames) / n_frames
    eyes = np.stack([c[0] + radius * np.cos(theta), c[1] + radius * np.sin(theta), np.full(n_frames, height)], 1)
    _check_clearance(scene, eyes, clearance)
    target = np.array([c[0], c[1], look_height])
    return [Pose.look_at(e, target) for e in eyes]


def _catmull_rom(points: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """C1 spline through waypoints sampled at ``n`` parameters; returns (positions, tangents)."""
    P = np.concatenate([points[:1], points, points[-1:]])
    segs = len(points) - 1
    s = np.linspace(0, segs, n)
    i = np.minimum(s.astype(int), segs - 1)
    t = (s - i)[:, None]
    p0, p1, p2, p3 = P[i], P[i + 1], P[i + 2], P[i + 3]
    pos = 0.5 * ((2 * p1) + (-p0 + p2) * t + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t**2 + (-p0 + 3 * p1 - 3 * p2 + p3) * t**3)
    tan = 0.5 * ((-p0 + p2) + 2 * (2 * p0 - 5 * p1 + 4 * p2 - p3) * t + 3 * (-p0 + 3 * p1 - 3 * p2 + p3) * t**2)
    return pos, tan


def nav_trajectory(
    scene: Scene,
    n_frames: int,
    waypoints=None,
    height: float = 1.2,
    pitch: float = -0.35,
    clearance: float = 0.1,
) -> list[Pose]:
    """Fixed-height waypoint path with yaw following the path tangent."""
    if waypoints is None:
        lo, hi = scene.bounds_min, scene.bounds_max
        m = 1.0  # Catmull-Rom overshoots square corners by about half the margin
        waypoints = [(lo[0] + m, lo[1] + m), (hi[0] - m, lo[1] + m), (hi[0] - m, hi[1] - m), (lo[0] + m, hi[1] - m)]
    wp = np.array([[w[0], w[1], height] for w in waypoints], dtype=np.float64)
    _check_clearance(scene, wp, clearance)
    pos, tan = _catmull_rom(wp, n_frames)
    _check_clearance(scene, pos, clearance)
    poses = []
    for p, d in zip(pos, tan):
        yaw = math.atan2(d[1], d[0])
        fwd = np.array([math.cos(yaw) * math.cos(pitch), math.sin(yaw) * math.cos(pitch), math.sin(pitch)])
        poses.append(Pose.look_at(p, p + fwd))
    return poses


def approach_trajectory(
    scene: Scene,
    n_frames: int,
    target_index: int = -1,
    start=None,
    stop_distance: float = 0.4,
    clearance: float = 0.1,
) -> list[Pose]:
    """Dolly toward a primitive, always looking at it, ending ``stop_distance`` from its surface."""
    prim = scene.primitives[target_index]
    target = np.asarray(prim.center, dtype=np.float64)
    if start is None:
        start = np.array([scene.bounds_min[0] + 0.8, scene.bounds_min[1] + 0.8, 1.4])
    start = np.asarray(start, dtype=np.float64)
    direction = target - start
    total = np.linalg.norm(direction)
    direction /= total
    # find where the straight path is stop_distance from the target primitive surface
    ts = np.linspace(0, total, 2000)
    line = start + ts[:, None] * direction
    dist = prim.sdf_grad(line)[0]
    reach = np.nonzero(dist <= stop_distance)[0]
    if len(reach) == 0:
        raise ValueError("target primitive is not reachable along the approach line")
    t_end = ts[reach[0]]
    # smoothstep in time keeps position C1 with zero velocity at both ends
    s = np.linspace(0, 1, n_frames)
    s = s * s * (3 - 2 * s)
    eyes = start + (s * t_end)[:, None] * direction
    _check_clearance(scene, eyes, clearance)
    return [Pose.look_at(e, target) for e in eyes]


def generate_trajectory(kind: str, scene: Scene, n_frames: int, rng: np.random.Generator | None = None, **kw) -> list[Pose]:
    """``orbit``, ``nav`` or ``approach``. ``rng`` jitters nav waypoints when given."""
    if kind == "orbit":
        return orbit_trajectory(scene, n_frames, **kw)
    if kind == "nav":
        if rng is not None and "waypoints" not in kw:
            lo, hi = scene.bounds_min + 0.6, scene.bounds_max - 0.6
            kw["waypoints"] = [tuple(rng.uniform(lo[:2], hi[:2])) for _ in range(4)]
        return nav_trajectory(scene, n_frames, **kw)
    if kind == "approach":
        return approach_trajectory(scene, n_frames, **kw)
    raise ValueError(f"unknown trajectory kind '{kind}'")


def render_sequence(
    scene: Scene,
    poses: list[Pose],
    intrinsics: Intrinsics,
    noise: NoiseParams | None = None,
    seed: int = 0,
    frame_period: float = 1.0 / 30,
) -> list[DepthFrame]:
    frames = []
    for i, pose in enumerate(poses):
        fr = render_depth(scene, pose, intrinsics, frame_id=i, timestamp=i * frame_period)
        if noise is not None:
            fr = add_depth_noise(fr, noise, np.random.default_rng([seed, i]))
        frames.append(fr)
    return frames
