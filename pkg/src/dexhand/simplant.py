"""Simulated hand: joint plants, linear guide, synthetic camera, scripted expert.

Joint ``3f + k`` belongs to finger ``f`` (0 thumb .. 4 little) with ``k`` = 0
MCP roll, 1 MCP pitch, 2 PIP.  Angles are degrees, guide travel millimetres.
The guide coordinate ``z`` grows as the hand descends; the hand-to-object gap
is ``object_height_mm - z``.
"""

import csv
import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .control import N_JOINTS, PidGains, PidState, motor_command, pid_step
from .errors import UnknownTaskError
from .rng import CounterRng

TASK_KINDS = ("foam-grasp", "cup-grasp", "wireball-grasp", "foam-rotate", "faucet-grasp-unscrew")

IMAGE_HEIGHT = 160
IMAGE_WIDTH = 320
VIEW_WINDOW_MM = 100.0
GUIDE_TRAVEL_MM = 450.0
CONTACT_THRESHOLD_MM = 5.0
SUCCESS_TOLERANCE_DEG = 2.0
DEFAULT_FRAME_RATE_HZ = 30.0

JOINT_LIMITS_DEG = np.array([(-90.0, 90.0), (0.0, 90.0), (0.0, 90.0)] * 5)


@dataclass(frozen=True)
class MotorJointPlant:
    """First-order geared motor with a return spring.

    ``angle' = angle + dt * (gain * command - spring_rate * (angle - rest))``,
    clamped to ``limits``.  A constant command ``c`` settles at
    ``rest + gain * c / spring_rate``.
    """

    gain: float = 90.0
    spring_rate: float = 2.0
    rest_angle: float = 0.0
    limits: tuple = (0.0, 90.0)

    def __post_init__(self):
        lo, hi = self.limits
        if self.gain <= 0 or self.spring_rate < 0:
            raise ValueError("plant needs gain > 0 and spring_rate >= 0")
        if not lo <= self.rest_angle <= hi:
            raise ValueError("rest angle outside limits")


def plant_step(plant: MotorJointPlant, angle: float, command: float, dt: float) -> float:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not -1.0 <= command <= 1.0:
        raise ValueError("command must lie in [-1, 1]")
    raw = angle + dt * (plant.gain * command - plant.spring_rate * (angle - plant.rest_angle))
    return float(min(max(raw, plant.limits[0]), plant.limits[1]))


class HandPlant:
    """Fifteen independent joint plants stepped together."""

    def __init__(self, plants):
        plants = list(plants)
        if len(plants) != N_JOINTS:
            raise ValueError(f"hand needs {N_JOINTS} joint plants")
        self.plants = tuple(plants)
        self.gain = np.array([p.gain for p in plants])
        self.spring_rate = np.array([p.spring_rate for p in plants])
        self.rest = np.array([p.rest_angle for p in plants])
        self.lo = np.array([p.limits[0] for p in plants])
        self.hi = np.array([p.limits[1] for p in plants])

    @classmethod
    def default(cls, gain=90.0, spring_rate=2.0, rest_angle=0.0) -> "HandPlant":
        return cls(
            MotorJointPlant(gain, spring_rate, rest_angle, tuple(lim)) for lim in JOINT_LIMITS_DEG
        )

    def step(self, angles, commands, dt: float):
        """Returns ``(new_angles, clamped)``; ``clamped`` flags joints held at a limit."""
        commands = np.asarray(commands, dtype=float)
        if np.any(np.abs(commands) > 1.0):
            raise ValueError("commands must lie in [-1, 1]")
        raw = angles + dt * (self.gain * commands - self.spring_rate * (angles - self.rest))
        out = np.clip(raw, self.lo, self.hi)
        return out, out != raw


@dataclass(frozen=True)
class HandState:
    angles: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    contacts: tuple = (False,) * 5


@dataclass(frozen=True)
class SceneSpec:
    task: str
    object_size_mm: float = None
    object_height_mm: float = 300.0
    background_seed: int = 0

    def __post_init__(self):
        if self.task not in TASK_KINDS:
            raise UnknownTaskError(f"unknown task {self.task!r}")
        if not 0.0 <= self.object_height_mm <= GUIDE_TRAVEL_MM:
            raise ValueError("object height must lie within the guide travel")
        if self.object_size_mm is None:
            object.__setattr__(self, "object_size_mm", _OBJECT_STYLE[self.task][2])

    def to_dict(self):
        return {
            "task": self.task,
            "object_size_mm": self.object_size_mm,
            "object_height_mm": self.object_height_mm,
            "background_seed": self.background_seed,
        }

    @classmethod
    def from_dict(cls, doc) -> "SceneSpec":
        return cls(
            doc["task"],
            float(doc["object_size_mm"]),
            float(doc["object_height_mm"]),
            int(doc["background_seed"]),
        )


@dataclass(frozen=True)
class GuideState:
    z: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.z <= GUIDE_TRAVEL_MM:
            raise ValueError("guide position outside its 450 mm travel")


def gap_mm(scene: SceneSpec, guide: GuideState) -> float:
    return scene.object_height_mm - guide.z


# --- synthetic camera -------------------------------------------------------

# shape, RGB, default size (mm)
_OBJECT_STYLE = {
    "foam-grasp": ("square", (235, 205, 40), 60.0),
    "cup-grasp": ("cup", (205, 45, 45), 55.0),
    "wireball-grasp": ("ball", (60, 190, 70), 50.0),
    "foam-rotate": ("diamond", (235, 205, 40), 60.0),
    "faucet-grasp-unscrew": ("faucet", (50, 90, 225), 50.0),
}
_FINGER_RGB = np.array([250.0, 238.0, 222.0])
_OBJECT_SCALE = 22.0  # px * mm / mm
_FOCAL_OFFSET_MM = 25.0
_OBJECT_COLUMNS = (92, 228)
_MARK_WIDTH = 6
_MARK_HEIGHT = 6
_MARK_PITCH = 11
_MARK_TRAVEL_PX = IMAGE_HEIGHT - _MARK_HEIGHT - 1
_MARK_FULL_DEG = 60.0  # markers stop here; the default plant holds at most 45

_ROWS, _COLS = np.mgrid[0:IMAGE_HEIGHT, 0:IMAGE_WIDTH].astype(float)


@lru_cache(maxsize=128)
def _background(seed: int) -> np.ndarray:
    rng = CounterRng(seed, stream=11)
    coarse = rng.uniform(70.0, 150.0, (5, 9, 3))
    ry = np.linspace(0, coarse.shape[0] - 1, IMAGE_HEIGHT)
    rx = np.linspace(0, coarse.shape[1] - 1, IMAGE_WIDTH)
    y0 = np.minimum(ry.astype(int), coarse.shape[0] - 2)
    x0 = np.minimum(rx.astype(int), coarse.shape[1] - 2)
    fy = (ry - y0)[:, None, None]
    fx = (rx - x0)[None, :, None]
    top = coarse[y0][:, x0] * (1 - fx) + coarse[y0][:, x0 + 1] * fx
    bot = coarse[y0 + 1][:, x0] * (1 - fx) + coarse[y0 + 1][:, x0 + 1] * fx
    smooth = top * (1 - fy) + bot * fy
    grain = rng.uniform(-6.0, 6.0, (IMAGE_HEIGHT, IMAGE_WIDTH, 1))
    img = np.clip(smooth + grain, 0, 255)
    img.setflags(write=False)
    return img


def _object_centre(seed: int):
    rng = CounterRng(seed, stream=12)
    return 80.0 + rng.uniform(-6.0, 6.0), 160.0 + rng.uniform(-6.0, 6.0)


def apparent_radius_px(scene: SceneSpec, gap: float) -> float:
    return _OBJECT_SCALE * scene.object_size_mm / (max(gap, 0.0) + _FOCAL_OFFSET_MM)


def _object_layers(scene: SceneSpec, gap: float):
    """(mask, rgb) pairs, painted in order."""
    shape, rgb, _ = _OBJECT_STYLE[scene.task]
    rgb = np.array(rgb, dtype=float)
    radius = apparent_radius_px(scene, gap)
    cy, cx = _object_centre(scene.background_seed)
    dy, dx = _ROWS - cy, _COLS - cx
    inside_cols = (_COLS >= _OBJECT_COLUMNS[0]) & (_COLS < _OBJECT_COLUMNS[1])
    dark = rgb * 0.7
    if shape == "square":
        outer = (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
        cell = max(radius / 3.0, 1.0)
        inner = outer & ((np.floor(dy / cell) + np.floor(dx / cell)) % 2 == 0)
    elif shape == "diamond":
        outer = np.abs(dy) + np.abs(dx) <= 1.3 * radius
        cell = max(radius / 3.0, 1.0)
        inner = outer & ((np.floor((dy + dx) / cell) + np.floor((dy - dx) / cell)) % 2 == 0)
    elif shape == "cup":
        rr = np.hypot(dy, dx)
        outer = rr <= radius
        inner = rr <= 0.7 * radius
    elif shape == "ball":
        rr = np.hypot(dy, dx)
        outer = rr <= radius
        inner = outer & (np.abs(rr - 0.55 * radius) <= 0.08 * radius + 0.5)
    else:  # faucet: spout body plus a cross handle
        outer = ((np.abs(dy) <= 0.35 * radius) & (np.abs(dx) <= 0.9 * radius)) | (
            (np.abs(dx) <= 0.18 * radius) & (np.abs(dy) <= 0.9 * radius)
        )
        inner = outer & (np.hypot(dy, dx) <= 0.25 * radius)
    return [(outer & inside_cols, rgb), (inner & inside_cols, dark)]


def _draw_fingers(img: np.ndarray, angles: np.ndarray) -> None:
    # one marker per joint, sliding down its own column as the joint flexes
    # (the view of a fingertip from the palm camera); the marker's top edge
    # is blended across two rows so sub-pixel motion survives
    for j in range(N_JOINTS):
        if j < 8:
            col = 2 + j * _MARK_PITCH
        else:
            col = _OBJECT_COLUMNS[1] + 2 + (j - 8) * _MARK_PITCH
        pos = min(abs(float(angles[j])), _MARK_FULL_DEG) / _MARK_FULL_DEG * _MARK_TRAVEL_PX
        top = int(pos)
        frac = pos - top
        band = img[:, col:col + _MARK_WIDTH]
        band[top + 1:top + _MARK_HEIGHT] = _FINGER_RGB
        band[top] = band[top] * frac + _FINGER_RGB * (1 - frac)
        band[top + _MARK_HEIGHT] = band[top + _MARK_HEIGHT] * (1 - frac) + _FINGER_RGB * frac


def render_scene(scene: SceneSpec, guide: GuideState, hand: HandState = None) -> np.ndarray:
    """160x320 RGB ``uint8`` camera frame from the hand-mounted camera."""
    img = np.array(_background(scene.background_seed), dtype=float)
    gap = gap_mm(scene, guide)
    if gap <= VIEW_WINDOW_MM:
        for mask, rgb in _object_layers(scene, gap):
            img[mask] = rgb
    if hand is not None:
        _draw_fingers(img, hand.angles)
    return np.rint(img).astype(np.uint8)


# --- scripted expert --------------------------------------------------------


@dataclass(frozen=True)
class GraspScripts:
    """Per-task closure scripts: ordered ``(joint, target_deg, stage)`` entries."""

    tasks: dict
    version: int = 1
    contact_threshold_mm: float = CONTACT_THRESHOLD_MM
    reach_tolerance_deg: float = 1.0

    def stages(self, task: str):
        try:
            entries = self.tasks[task]
        except KeyError:
            raise UnknownTaskError(f"no grasp script for task {task!r}") from None
        out = {}
        for joint, target, stage in entries:
            out.setdefault(stage, []).append((joint, target))
        return [out[k] for k in sorted(out)]

    @classmethod
    def from_dict(cls, doc) -> "GraspScripts":
        tasks = {}
        for name, entries in doc["tasks"].items():
            rows = []
            for entry in entries:
                joint, target = int(entry[0]), float(entry[1])
                stage = int(entry[2]) if len(entry) > 2 else 0
                if not 0 <= joint < N_JOINTS:
                    raise ValueError(f"{name}: joint index {joint} out of range")
                rows.append((joint, target, stage))
            tasks[name] = tuple(rows)
        return cls(
            tasks,
            int(doc.get("version", 1)),
            float(doc.get("contact_threshold_mm", CONTACT_THRESHOLD_MM)),
            float(doc.get("reach_tolerance_deg", 1.0)),
        )


def load_grasp_scripts(path=None) -> GraspScripts:
    if path is None:
        text = resources.files("dexhand").joinpath("data/grasp_scripts.json").read_text()
    else:
        text = Path(path).read_text()
    return GraspScripts.from_dict(json.loads(text))


@lru_cache(maxsize=1)
def default_scripts() -> GraspScripts:
    return load_grasp_scripts()


def scripted_expert(scene: SceneSpec, guide: GuideState, hand: HandState,
                    scripts: GraspScripts = None) -> np.ndarray:
    """Demonstrator stand-in: close the current stage's joints once at the object."""
    scripts = scripts or default_scripts()
    stages = scripts.stages(scene.task)
    bits = np.zeros(N_JOINTS, dtype=np.uint8)
    if gap_mm(scene, guide) > scripts.contact_threshold_mm:
        return bits
    for stage in stages:
        pending = [j for j, target in stage if hand.angles[j] < target - scripts.reach_tolerance_deg]
        if pending:
            bits[pending] = 1
            return bits
    return bits


def is_rotation_task(task: str) -> bool:
    return task in ("foam-rotate", "faucet-grasp-unscrew")


# --- closed-loop harness ----------------------------------------------------


@dataclass
class TaskLog:
    t: np.ndarray
    z: np.ndarray
    q_m: np.ndarray
    setpoint: np.ndarray
    command: np.ndarray

    def __len__(self):
        return len(self.t)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "t", "z"] + [f"q{j}" for j in range(N_JOINTS)]
                       + [f"sp{j}" for j in range(N_JOINTS)] + [f"cmd{j}" for j in range(N_JOINTS)])
            for k in range(len(self.t)):
                row = [k, f"{self.t[k]:.6f}", f"{self.z[k]:.6f}"]
                row += [f"{v:.6f}" for v in self.q_m[k]]
                row += [f"{v:.1f}" for v in self.setpoint[k]]
                row += [str(int(v)) for v in self.command[k]]
                w.writerow(row)
        return path


@dataclass
class TaskResult:
    success: bool
    steps: int
    log: TaskLog


def start_gap_mm(task: str) -> float:
    # the rotation trial begins already at the object
    return 0.0 if task == "foam-rotate" else VIEW_WINDOW_MM


def run_task(scene: SceneSpec, policy, plant: HandPlant = None, seed: int = 0,
             max_steps: int = 400, gains: PidGains = None, dt: float = 1 / DEFAULT_FRAME_RATE_HZ,
             descent_mm_s: float = 60.0, hold_steps: int = 15,
             scripts: GraspScripts = None, initial_angles=None) -> TaskResult:
    """Closed-loop trial.

    Each step: query ``policy(scene, guide, hand)`` for a 15-bit command, add
    1 degree to the PID setpoint of every set bit, run the PID and the plants
    for ``dt``, lower the guide until contact.  ``seed`` jitters the start
    height.  The trial succeeds once the success predicate has held for
    ``hold_steps`` consecutive steps.

    Success: every scripted joint within 2 degrees of its target.  Joints of
    later stages (rotations) additionally need their commanded increments to
    have been issued while all earlier stages already held, so rotating
    before grasping does not count.

    ``log`` has one row per step with the state the policy observed, plus a
    final row with the state after the last step.  ``initial_angles``
    starts the hand (and its setpoints) at a pose it is already holding.
    """
    if max_steps <= 0:
        raise ValueError("max_steps must be positive")
    plant = plant or HandPlant.default()
    gains = gains or PidGains()
    scripts = scripts or default_scripts()
    stages = scripts.stages(scene.task)
    rng = CounterRng(seed, stream=21)

    gap0 = start_gap_mm(scene.task)
    if gap0 > 0:
        gap0 -= rng.uniform(0.0, 8.0)
    z = max(0.0, scene.object_height_mm - gap0)
    if initial_angles is None:
        q_m = plant.rest.copy()
    else:
        q_m = np.clip(np.asarray(initial_angles, dtype=float).reshape(N_JOINTS), plant.lo, plant.hi)
    setpoint = q_m.copy()
    pid = PidState.reset()
    if initial_angles is not None and gains.ki > 0:
        # the hand has been holding this pose: start the integrator at the
        # value that balances the springs, so nothing sags on the first steps
        hold = plant.spring_rate * (q_m - plant.rest) / plant.gain
        pid = PidState(np.clip(-hold / gains.ki, -gains.integral_limit, gains.integral_limit),
                       np.zeros(N_JOINTS))
    counted = np.zeros(N_JOINTS)
    held = 0
    success = False

    ts, zs, qs, sps, cmds = [], [], [], [], []
    steps = 0
    for k in range(max_steps):
        hand = HandState(q_m.copy(), _contacts(scene, z, q_m))
        bits = np.asarray(policy(scene, GuideState(z), hand), dtype=np.uint8).reshape(N_JOINTS)
        if np.any(bits > 1):
            raise ValueError("policy must return binary commands")
        ts.append(k * dt)
        zs.append(z)
        qs.append(q_m.copy())
        cmds.append(bits.copy())

        # rotation credit only once every earlier stage holds
        for s, stage in enumerate(stages[1:], start=1):
            if all(_stage_holds(st, q_m) for st in stages[:s]):
                for j, _ in stage:
                    counted[j] += bits[j]

        setpoint = np.clip(setpoint + bits, plant.lo, plant.hi)
        sps.append(setpoint.copy())
        q_r, pid = pid_step(gains, pid, setpoint, q_m, dt)
        q_m, _ = plant.step(q_m, motor_command(q_r), dt)
        z = min(z + descent_mm_s * dt, scene.object_height_mm)
        steps = k + 1

        ok = all(_stage_holds(stage, q_m) for stage in stages) and all(
            counted[j] >= target - SUCCESS_TOLERANCE_DEG for stage in stages[1:] for j, target in stage
        )
        held = held + 1 if ok else 0
        if held >= hold_steps:
            success = True
            break

    ts.append(steps * dt)
    zs.append(z)
    qs.append(q_m.copy())
    cmds.append(np.zeros(N_JOINTS, dtype=np.uint8))
    sps.append(setpoint.copy())
    log = TaskLog(np.array(ts), np.array(zs), np.array(qs), np.array(sps), np.array(cmds))
    return TaskResult(success, steps, log)


def _stage_holds(stage, q_m) -> bool:
    return all(abs(q_m[j] - target) <= SUCCESS_TOLERANCE_DEG for j, target in stage)


def _contacts(scene: SceneSpec, z: float, q_m: np.ndarray) -> tuple:
    at_object = scene.object_height_mm - z <= 0.5
    flex = q_m[1::3] + q_m[2::3]
    return tuple(bool(at_object and f > 20.0) for f in flex)


def zero_policy(scene, guide, hand) -> np.ndarray:
    return np.zeros(N_JOINTS, dtype=np.uint8)


def evaluation_scenes(task: str, n: int, seed: int):
    """``n`` scene variants (background, object height) for one task."""
    rng = CounterRng(seed, stream=31 + TASK_KINDS.index(task))
    return [
        SceneSpec(task, object_height_mm=float(rng.uniform(150.0, 420.0)),
                  background_seed=int(rng.integers(0, 2**31)))
        for _ in range(n)
    ]
