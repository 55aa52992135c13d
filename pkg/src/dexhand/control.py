"""Per-joint PID control, demonstration replay and command binarisation.

Angles are degrees here: these functions sit at the hardware-facing layer
where potentiometer readings and setpoints are in degrees.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import TooShortError

N_JOINTS = 15
DEFAULT_THRESHOLD_DEG = 0.5
INTEGRAL_LIMIT = 100.0


@dataclass(frozen=True)
class PidGains:
    kp: np.ndarray = field(default_factory=lambda: np.full(N_JOINTS, 0.5))
    ki: float = 0.1
    kd: float = 0.0
    integral_limit: float = INTEGRAL_LIMIT

    def __post_init__(self):
        kp = np.broadcast_to(np.asarray(self.kp, dtype=float), (N_JOINTS,)).copy()
        if np.any(kp < 0) or self.ki < 0 or self.kd < 0:
            raise ValueError("PID gains must be non-negative")
        object.__setattr__(self, "kp", kp)


@dataclass(frozen=True)
class PidState:
    integral: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    prev_error: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))

    @classmethod
    def reset(cls) -> "PidState":
        return cls()


def pid_step(gains: PidGains, state: PidState, q_d, q_m, dt: float):
    """One controller update.  Returns ``(q_r, new_state)``.

    The error is measured minus desired, so a joint below its setpoint gives
    a negative ``q_r``; the plant is driven with ``-q_r``.  The integral
    includes the current error and is clamped to ``gains.integral_limit``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    e = np.asarray(q_m, dtype=float) - np.asarray(q_d, dtype=float)
    integral = np.clip(state.integral + e, -gains.integral_limit, gains.integral_limit)
    q_r = gains.kp * e + gains.ki * integral + gains.kd * (e - state.prev_error) / dt
    return q_r, PidState(integral, e)


def motor_command(q_r) -> np.ndarray:
    """Controller output to normalised plant command in [-1, 1]."""
    return np.clip(-np.asarray(q_r, dtype=float), -1.0, 1.0)


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    q_d: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(-1)
        q = np.asarray(self.q_d, dtype=float).reshape(len(t), -1) if len(t) else np.zeros((0, N_JOINTS))
        if q.shape[1] != N_JOINTS:
            raise ValueError(f"trajectory rows need {N_JOINTS} angles")
        if np.any(np.diff(t) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q_d", q)

    def __len__(self):
        return len(self.t)

    @classmethod
    def constant(cls, q_d, duration: float, dt: float) -> "Trajectory":
        n = int(round(duration / dt)) + 1
        return cls(np.arange(n) * dt, np.tile(np.asarray(q_d, dtype=float), (n, 1)))


def binarize_deltas(traj: Trajectory, threshold_deg: float = DEFAULT_THRESHOLD_DEG) -> np.ndarray:
    """Bit ``[t, i]`` is 1 when joint ``i`` moves at least ``threshold_deg`` from t to t+1."""
    if threshold_deg <= 0:
        raise ValueError("threshold must be positive")
    if len(traj) < 2:
        raise TooShortError("need at least two samples to form deltas")
    return (np.abs(np.diff(traj.q_d, axis=0)) >= threshold_deg).astype(np.uint8)


@dataclass
class ReplayLog:
    t: np.ndarray
    q_d: np.ndarray
    q_m: np.ndarray
    q_r: np.ndarray
    saturated: np.ndarray

    def __len__(self):
        return len(self.t)

    def write_csv(self, path) -> Path:
        """Long format: one row per (step, joint)."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "joint", "q_d", "q_m", "q_r", "saturated"])
            for k in range(len(self.t)):
                for j in range(self.q_d.shape[1]):
                    w.writerow([
                        f"{self.t[k]:.6f}", j,
                        f"{self.q_d[k, j]:.6f}", f"{self.q_m[k, j]:.6f}",
                        f"{self.q_r[k, j]:.6f}", int(self.saturated[k, j]),
                    ])
        return path


def replay_trajectory(traj: Trajectory, plant, gains: PidGains = None, dt: float = 1 / 30,
                      q0=None) -> ReplayLog:
    """Drive ``plant`` through a recorded trajectory.

    The active setpoint is the latest sample at or before the simulation
    clock (zero-order hold); the clock runs from the first to the last sample
    time in steps of ``dt``.  ``plant`` is a :class:`dexhand.simplant.HandPlant`.
    Each log row holds the measurement that ``q_r`` was computed from.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    gains = gains or PidGains()
    if len(traj) == 0:
        empty = np.zeros((0, N_JOINTS))
        return ReplayLog(np.zeros(0), empty, empty, empty, empty.astype(bool))
    n_steps = int(np.floor((traj.t[-1] - traj.t[0]) / dt + 1e-9)) + 1
    clock = traj.t[0] + np.arange(n_steps) * dt
    active = np.searchsorted(traj.t, clock + 1e-9, side="right") - 1
    q_m = plant.rest.copy() if q0 is None else np.asarray(q0, dtype=float).copy()
    state = PidState.reset()
    log_qm, log_qr, log_sat = [], [], []
    for k in range(n_steps):
        q_d = traj.q_d[active[k]]
        q_r, state = pid_step(gains, state, q_d, q_m, dt)
        log_qm.append(q_m)
        log_qr.append(q_r)
        q_m, sat = plant.step(q_m, motor_command(q_r), dt)
        log_sat.append(sat)
    return ReplayLog(clock, traj.q_d[active], np.array(log_qm), np.array(log_qr), np.array(log_sat))
