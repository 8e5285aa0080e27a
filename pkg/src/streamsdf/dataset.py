"""On-disk depth sequence format.

Layout of a dataset directory::

    meta.txt        key=value lines: fx fy cx cy width height depth_format
                    depth_scale n_frames frame_period bounds_min bounds_max
    poses.txt       one row-major 4x4 T_WC per line (16 numbers), frame order
    depth/000000.png   16-bit grayscale, depth * depth_scale (mm by default), 0 = invalid
    depth/000000.f32   or raw little-endian float32, row-major (H, W), 0 or NaN = invalid
    scene.txt       optional scene description (see ``scenes.format_scene``)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import DepthFrame, Intrinsics, Pose
from .scenes import Scene, load_scene, save_scene


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    frames: list[DepthFrame]
    intrinsics: Intrinsics
    bounds: tuple[np.ndarray, np.ndarray] | None = None
    scene: Scene | None = None
    frame_period: float = 1.0 / 30

    def __len__(self) -> int:
        return len(self.frames)


def _fmt_vec(v) -> str:
    return ",".join(repr(float(x)) for x in v)


def write_dataset(
    path: str | Path,
    frames: list[DepthFrame],
    depth_format: str = "f32",
    depth_scale: float = 1000.0,
    scene: Scene | None = None,
    bounds=None,
    frame_period: float = 1.0 / 30,
) -> Path:
    if depth_format not in ("png", "f32"):
        raise ValueError("depth_format must be 'png' or 'f32'")
    if not frames:
        raise ValueError("no frames to write")
    root = Path(path)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    intr = frames[0].intrinsics
    if bounds is None and scene is not None:
        bounds = (scene.bounds_min, scene.bounds_max)
    meta = {
        "fx": repr(intr.fx), "fy": repr(intr.fy), "cx": repr(intr.cx), "cy": repr(intr.cy),
        "width": str(intr.width), "height": str(intr.height),
        "depth_format": depth_format, "depth_scale": repr(float(depth_scale)),
        "n_frames": str(len(frames)), "frame_period": repr(float(frame_period)),
    }
    if bounds is not None:
        meta["bounds_min"] = _fmt_vec(bounds[0])
        meta["bounds_max"] = _fmt_vec(bounds[1])
    (root / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))

    with open(root / "poses.txt", "w") as fh:
        for fr in frames:
            if fr.intrinsics != intr:
                raise ValueError(f"frame {fr.frame_id} has different intrinsics")
            fh.write(" ".join(repr(float(x)) for x in fr.pose.matrix().ravel()) + "\n")

    for i, fr in enumerate(frames):
        d = np.nan_to_num(fr.depth, nan=0.0)
        if depth_format == "f32":
            d.astype("<f4").tofile(root / "depth" / f"{i:06d}.f32")
        else:
            q = np.rint(d * depth_scale)
            if q.max() > 65535:
                raise ValueError(f"frame {i}: depth exceeds the 16-bit range at scale {depth_scale}")
            Image.fromarray(q.astype(np.uint16)).save(root / "depth" / f"{i:06d}.png")
    if scene is not None:
        save_scene(root / "scene.txt", scene)
    return root


def _read_meta(path: Path) -> dict[str, str]:
    meta = {}
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{ln}: expected key=value, got '{line}'")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    return meta


def read_poses(path: str | Path) -> list[Pose]:
    poses = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            vals = [float(t) for t in line.split()]
        except ValueError as exc:
            raise DatasetError(f"{path}:{ln}: {exc}") from None
        if len(vals) != 16:
            raise DatasetError(f"{path}:{ln}: expected 16 numbers, got {len(vals)}")
        T = np.array(vals).reshape(4, 4)
        if not np.allclose(T[3], [0, 0, 0, 1]):
            raise DatasetError(f"{path}:{ln}: last row must be 0 0 0 1")
        try:
            poses.append(Pose.from_matrix(T))
        except ValueError as exc:
            raise DatasetError(f"{path}:{ln}: {exc}") from None
    return poses


def read_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    if not (root / "meta.txt").is_file():
        raise DatasetError(f"{root}: missing meta.txt")
    meta = _read_meta(root / "meta.txt")
    try:
        intr = Intrinsics(float(meta["fx"]), float(meta["fy"]), float(meta["cx"]), float(meta["cy"]),
                          int(meta["width"]), int(meta["height"]))
        fmt = meta.get("depth_format", "png")
        scale = float(meta.get("depth_scale", 1000.0))
        period = float(meta.get("frame_period", 1.0 / 30))
    except KeyError as exc:
        raise DatasetError(f"{root}/meta.txt: missing key {exc}") from None
    poses = read_poses(root / "poses.txt")
    files = sorted((root / "depth").glob(f"*.{fmt}"))
    if len(files) != len(poses):
        raise DatasetError(f"{root}: {len(poses)} poses but {len(files)} depth frames")
    if "n_frames" in meta and int(meta["n_frames"]) != len(poses):
        raise DatasetError(f"{root}: meta declares {meta['n_frames']} frames but found {len(poses)} poses")
    frames = []
    shape = (intr.height, intr.width)
    for i, (f, pose) in enumerate(zip(files, poses)):
        if fmt == "f32":
            raw = np.fromfile(f, dtype="<f4")
            if raw.size != shape[0] * shape[1]:
                raise DatasetError(f"frame {i} ({f.name}): expected {shape[0] * shape[1]} floats, got {raw.size}")
            d = raw.reshape(shape).astype(np.float64)
        else:
            img = np.asarray(Image.open(f))
            if img.shape != shape:
                raise DatasetError(f"frame {i} ({f.name}): image shape {img.shape}, expected {shape}")
            d = img.astype(np.float64) / scale
        frames.append(DepthFrame(d, pose, intr, frame_id=i, timestamp=i * period))
    bounds = None
    if "bounds_min" in meta and "bounds_max" in meta:
        bounds = (np.array([float(t) for t in meta["bounds_min"].split(",")]),
                  np.array([float(t) for t in meta["bounds_max"].split(",")]))
    scene = load_scene(root / "scene.txt") if (root / "scene.txt").is_file() else None
    return Dataset(frames, intr, bounds, scene, period)
