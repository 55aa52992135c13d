"""Monte Carlo sampling of the fingertip workspace and voxel volume estimates."""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyCloudError
from .kinematics import FingerModel, fingertip_positions
from .rng import stream_key, uniform01

# Fixed partition size: the cloud depends only on (model, n, seed), never on
# how many workers produced it.
PARTITION = 1 << 16


@dataclass(frozen=True)
class WorkspaceCloud:
    points: np.ndarray
    seed: int
    sample_count: int

    def __post_init__(self):
        if len(self.points) != self.sample_count:
            raise ValueError("point count does not match sample_count")


@dataclass(frozen=True)
class WorkspaceStats:
    volume_mm3: float
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    voxel_mm: float
    occupied_voxels: int


def _partition_points(model: FingerModel, seed: int, index: int, count: int) -> np.ndarray:
    u = uniform01(stream_key(seed, index), 0, 3 * count).reshape(count, 3)
    lo = model.limits[:3, 0]
    span = model.limits[:3, 1] - lo
    q = lo + u * span
    return fingertip_positions(model, q[:, 0], q[:, 1], q[:, 2])


def _partition_job(args):
    return _partition_points(*args)


def sample_workspace(model: FingerModel, n: int, seed: int, workers: int = 1) -> WorkspaceCloud:
    """Draw ``n`` uniform in-limit poses and map them to fingertip positions.

    Pose ``k`` lives in partition ``k // PARTITION``, whose draws come from
    substream ``(seed, partition)``.
    """
    if n < 0:
        raise ValueError("sample count must be non-negative")
    jobs = []
    for index, start in enumerate(range(0, n, PARTITION)):
        jobs.append((model, seed, index, min(PARTITION, n - start)))
    if not jobs:
        return WorkspaceCloud(np.zeros((0, 3)), seed, 0)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_partition_job, jobs))
    else:
        parts = [_partition_job(job) for job in jobs]
    return WorkspaceCloud(np.concatenate(parts), seed, n)


def estimate_volume(cloud: WorkspaceCloud, voxel_mm: float) -> WorkspaceStats:
    """Occupied-voxel volume on a grid anchored at the origin."""
    if voxel_mm <= 0:
        raise ValueError("voxel size must be positive")
    pts = np.asarray(cloud.points)
    if len(pts) == 0:
        raise EmptyCloudError("cannot estimate the volume of an empty cloud")
    idx = np.floor(pts / voxel_mm).astype(np.int64)
    idx -= idx.min(axis=0)
    dims = idx.max(axis=0) + 1
    keys = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
    occupied = int(np.unique(keys).size)
    return WorkspaceStats(
        volume_mm3=occupied * voxel_mm**3,
        bbox_min=pts.min(axis=0),
        bbox_max=pts.max(axis=0),
        voxel_mm=float(voxel_mm),
        occupied_voxels=occupied,
    )


def export_cloud(cloud: WorkspaceCloud, fmt: str, path, raster_px: int = 512) -> Path:
    """Write ``cloud`` as ``csv``, ``ply`` or ``ppm-scatter``."""
    path = Path(path)
    pts = np.asarray(cloud.points, dtype=float)
    if fmt == "csv":
        lines = ["x,y,z"] + [f"{x:.6f},{y:.6f},{z:.6f}" for x, y, z in pts]
        path.write_text("\n".join(lines) + "\n")
    elif fmt == "ply":
        header = [
            "ply",
            "format ascii 1.0",
            f"comment seed {cloud.seed}",
            f"element vertex {len(pts)}",
            "property float x",
            "property float y",
            "property float z",
            "end_header",
        ]
        body = [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in pts]
        path.write_text("\n".join(header + body) + "\n")
    elif fmt == "ppm-scatter":
        path.write_bytes(scatter_ppm(pts, raster_px))
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    return path


def scatter_ppm(points: np.ndarray, size: int = 512, extent: float = None) -> bytes:
    """Binary PPM of the x-z projection; white background, dark points."""
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    if len(points):
        if extent is None:
            extent = max(1e-9, float(np.abs(points[:, [0, 2]]).max())) * 1.05
        col = np.floor((points[:, 0] + extent) / (2 * extent) * (size - 1) + 0.5).astype(int)
        row = np.floor((extent - points[:, 2]) / (2 * extent) * (size - 1) + 0.5).astype(int)
        keep = (col >= 0) & (col < size) & (row >= 0) & (row < size)
        img[row[keep], col[keep]] = (20, 40, 120)
    return f"P6\n{size} {size}\n255\n".encode() + img.tobytes()


def joint_space_volume(model: FingerModel) -> float:
    """Product of actuated joint ranges (rad^3); zero means a degenerate box."""
    return float(math.prod(model.limits[:3, 1] - model.limits[:3, 0]))
