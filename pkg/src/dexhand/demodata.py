"""Demonstration recordings and the image/label pipeline that feeds the policy.

Recordings are JSON Lines: a metadata object on line 1, then one frame per
line with keys ``t`` (seconds), ``angles`` (15 degrees) and optionally
``image``.  ``image`` is either a path to a binary PPM file or an inline
scene description ``{"scene": {...}, "z": mm}`` that the synthetic camera can
re-render, which keeps test corpora self-contained.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .control import DEFAULT_THRESHOLD_DEG, N_JOINTS, Trajectory, binarize_deltas
from .errors import MissingImageError, ParseError, RangeError, SizeError
from .rng import CounterRng
from .simplant import (
    IMAGE_HEIGHT,
    IMAGE_WIDTH,
    GuideState,
    HandState,
    SceneSpec,
    default_scripts,
    evaluation_scenes,
    render_scene,
    run_task,
    scripted_expert,
)


@dataclass(frozen=True)
class DemoFrame:
    t: float
    angles: tuple
    image: object = None

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles)
        if len(angles) != N_JOINTS:
            raise ValueError(f"frame needs {N_JOINTS} angles")
        if not all(math.isfinite(a) for a in angles):
            raise ValueError("frame angles must be finite")
        if not self.t >= 0:
            raise ValueError("frame time must be non-negative")
        object.__setattr__(self, "angles", angles)


@dataclass(frozen=True)
class DemoRecording:
    metadata: dict
    frames: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        times = [f.t for f in self.frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("frame times must be strictly increasing")

    def trajectory(self) -> Trajectory:
        return Trajectory([f.t for f in self.frames], [f.angles for f in self.frames])


def make_metadata(task: str, rate_hz: float, created: str = None, **extra) -> dict:
    if created is None:
        created = datetime.now(timezone.utc).replace(microsecond=0).isoformat()
    return {"task": task, "rate_hz": rate_hz, "created": created, **extra}


def write_recording(rec: DemoRecording, path) -> Path:
    path = Path(path)
    lines = [json.dumps(rec.metadata, sort_keys=True)]
    for frame in rec.frames:
        doc = {"t": frame.t, "angles": list(frame.angles)}
        if frame.image is not None:
            doc["image"] = frame.image
        lines.append(json.dumps(doc))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_recording(path) -> DemoRecording:
    path = Path(path)
    text = path.read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("missing metadata line", line=1, path=path)
    docs = []
    for lineno, line in enumerate(lines, 1):
        try:
            docs.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", line=lineno, path=path) from None
    metadata = docs[0]
    if not isinstance(metadata, dict):
        raise ParseError("metadata must be an object", line=1, path=path)
    frames = []
    for lineno, doc in enumerate(docs[1:], 2):
        try:
            if not isinstance(doc, dict) or set(doc) - {"t", "angles", "image"}:
                raise ValueError("frame must be an object with keys t, angles[, image]")
            frames.append(DemoFrame(float(doc["t"]), doc["angles"], doc.get("image")))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad frame: {exc}", line=lineno, path=path) from None
    try:
        return DemoRecording(metadata, frames)
    except ValueError as exc:
        raise ParseError(str(exc), path=path) from None


# --- images -----------------------------------------------------------------


@dataclass(frozen=True)
class PreprocessConfig:
    to_yuv: bool = True
    blur_sigma: float = 1.0
    normalize: bool = True
    luminance_range: tuple = (0.2, 1.2)

    def __post_init__(self):
        lo, hi = self.luminance_range
        if self.blur_sigma < 0:
            raise ValueError("blur sigma must be non-negative")
        if not 0 < lo <= hi:
            raise ValueError("luminance range must satisfy 0 < low <= high")

    def to_dict(self):
        return {"to_yuv": self.to_yuv, "blur_sigma": self.blur_sigma,
                "normalize": self.normalize, "luminance_range": list(self.luminance_range)}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# BT.601 full range (JPEG convention)
_RGB_TO_YUV = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YUV_OFFSET = np.array([0.0, 0.5, 0.5])


def rgb_to_yuv(rgb01: np.ndarray) -> np.ndarray:
    dtype = rgb01.dtype if rgb01.dtype in (np.float32, np.float64) else np.float64
    return rgb01 @ _RGB_TO_YUV.T.astype(dtype) + _YUV_OFFSET.astype(dtype)


def preprocess_image(img, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """RGB frame to a float32 ``(160, 320, 3)`` network input.

    ``uint8`` images are read as 0..255; float images as already on a 0..1
    scale.  Steps: optional YUV conversion, Gaussian blur (3 sigma support,
    edge replication), clamp to [0, 1].  With ``normalize=False`` the result
    is returned on the 0..255 scale.
    """
    arr = np.asarray(img)
    if arr.shape != (IMAGE_HEIGHT, IMAGE_WIDTH, 3):
        raise SizeError(f"expected a {IMAGE_HEIGHT}x{IMAGE_WIDTH} RGB image, got {arr.shape}")
    x = arr.astype(np.float32) / np.float32(255.0) if arr.dtype == np.uint8 else arr.astype(np.float32)
    if cfg.to_yuv:
        x = rgb_to_yuv(x)
    if cfg.blur_sigma > 0:
        x = gaussian_filter(x, sigma=(cfg.blur_sigma, cfg.blur_sigma, 0), mode="nearest", truncate=3.0)
    x = np.clip(x, 0.0, 1.0)
    if not cfg.normalize:
        x = x * 255.0
    return x.astype(np.float32)


def augment_luminance(img, factor: float, low: float = 0.2, high: float = 1.2) -> np.ndarray:
    """Scale the Y channel of a preprocessed YUV tensor; U and V are untouched."""
    if not low <= factor <= high:
        raise RangeError(f"luminance factor {factor} outside [{low}, {high}]")
    out = np.array(img, copy=True)
    out[..., 0] = np.clip(out[..., 0] * factor, 0.0, 1.0)
    return out


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    # header: magic, width, height, maxval, then exactly one whitespace byte
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ParseError("only binary P6 PPM images are supported", path=path)
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ParseError("only 8-bit PPM images are supported", path=path)
    pixels = data[pos + 1:pos + 1 + w * h * 3]
    if len(pixels) != w * h * 3:
        raise ParseError("truncated PPM pixel data", path=path)
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)


def write_ppm(img: np.ndarray, path) -> Path:
    img = np.asarray(img, dtype=np.uint8)
    path = Path(path)
    path.write_bytes(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + img.tobytes())
    return path


def frame_image(frame: DemoFrame, base_dir=None) -> np.ndarray:
    """Load or re-render the camera image attached to ``frame``."""
    ref = frame.image
    if ref is None:
        raise MissingImageError(f"frame at t={frame.t} has no image")
    if isinstance(ref, str):
        p = Path(ref)
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        return read_ppm(p)
    scene = SceneSpec.from_dict(ref["scene"])
    return render_scene(scene, GuideState(float(ref["z"])), HandState(np.array(frame.angles)))


# --- datasets ---------------------------------------------------------------


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    sources: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def manifest(self, cfg: PreprocessConfig, threshold_deg: float) -> dict:
        return {
            "samples": len(self),
            "input_shape": list(self.inputs.shape[1:]),
            "positive_rate": float(self.labels.mean()) if len(self) else 0.0,
            "threshold_deg": threshold_deg,
            "preprocess": cfg.to_dict(),
            "config_hash": cfg.digest(),
        }

    @classmethod
    def concatenate(cls, parts) -> "Dataset":
        parts = list(parts)
        return cls(
            np.concatenate([p.inputs for p in parts]),
            np.concatenate([p.labels for p in parts]),
            [s for p in parts for s in p.sources],
        )


def build_dataset(recordings, cfg: PreprocessConfig = PreprocessConfig(),
                  threshold_deg: float = DEFAULT_THRESHOLD_DEG, base_dir=None) -> Dataset:
    """Pair each frame's preprocessed image with the command that followed it.

    Sample order is (recording index, frame index).
    """
    n = 0
    for rec in recordings:
        if len(rec.frames) < 2:
            raise ValueError("each recording needs at least two frames")
        n += len(rec.frames) - 1
        for frame in rec.frames[:-1]:
            if frame.image is None:
                raise MissingImageError(f"frame at t={frame.t} has no image")
    inputs = np.empty((n, IMAGE_HEIGHT, IMAGE_WIDTH, 3), dtype=np.float32)
    labels = np.empty((n, N_JOINTS), dtype=np.uint8)
    sources = []
    k = 0
    for r, rec in enumerate(recordings):
        bits = binarize_deltas(rec.trajectory(), threshold_deg)
        for i, frame in enumerate(rec.frames[:-1]):
            inputs[k] = preprocess_image(frame_image(frame, base_dir), cfg)
            labels[k] = bits[i]
            sources.append((r, i))
            k += 1
    return Dataset(inputs, labels, sources)


def record_demonstration(scene: SceneSpec, seed: int = 0, rate_hz: float = 30.0,
                         max_steps: int = 400, created: str = "1970-01-01T00:00:00+00:00",
                         settle_frames: int = 15, **run_kwargs) -> DemoRecording:
    """Teach phase in simulation: the scripted expert performs the task while
    the joint angles are recorded together with the camera's scene state.

    A demonstration that cannot succeed (for example one started with a
    finger already past its target) is cut ``settle_frames`` after the
    expert's last command instead of idling until ``max_steps``.
    """
    result = run_task(scene, scripted_expert, seed=seed, max_steps=max_steps, dt=1.0 / rate_hz,
                      **run_kwargs)
    log = result.log
    n = len(log)
    if not result.success:
        active = np.nonzero(log.command.any(axis=1))[0]
        last = int(active[-1]) if len(active) else 0
        n = min(n, last + settle_frames + 2)
    scene_doc = scene.to_dict()
    frames = [
        DemoFrame(float(log.t[k]), log.q_m[k].tolist(), {"scene": scene_doc, "z": float(log.z[k])})
        for k in range(n)
    ]
    meta = make_metadata(scene.task, rate_hz, created, seed=seed, success=result.success)
    return DemoRecording(meta, frames)


def perturbed_start(task: str, seed: int, low_deg: float = -20.0, high_deg: float = 12.0,
                    spread_deg: float = 4.0) -> np.ndarray:
    """Random initial pose around the task's targets.

    All scripted joints share one offset from their targets, uniform in
    ``[low_deg, high_deg]``, plus individual jitter of up to ``spread_deg``;
    other joints stay at 0.  Demonstrations from such poses show the expert
    holding fingers that are already at or past their targets, states a
    learned policy can drift into.
    """
    rng = CounterRng(seed, stream=51)
    common = rng.uniform(low_deg, high_deg)
    q = np.zeros(N_JOINTS)
    for stage in default_scripts().stages(task):
        for j, target in stage:
            q[j] = min(max(target + common + rng.uniform(-spread_deg, spread_deg), 0.0),
                       target + high_deg)
    return q


def record_task_corpus(task: str, target_samples: int = 600, seed: int = 0,
                       rate_hz: float = 30.0, perturb_every: int = 3) -> list:
    """Demonstrations for one task until at least ``target_samples`` samples exist.

    Every ``perturb_every``-th demonstration starts from :func:`perturbed_start`
    (0 disables this).
    """
    recordings, total, k = [], 0, 0
    while total < target_samples:
        if k % 32 == 0:
            scenes = evaluation_scenes(task, k + 32, seed)
        scene = scenes[k]
        demo_seed = seed * 1000 + k
        start = None
        if perturb_every and k % perturb_every == perturb_every - 1:
            start = perturbed_start(task, demo_seed)
        rec = record_demonstration(scene, seed=demo_seed, rate_hz=rate_hz, initial_angles=start)
        recordings.append(rec)
        total += len(rec.frames) - 1
        k += 1
    return recordings
