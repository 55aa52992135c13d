"""Finger forward kinematics with a wire-coupled distal joint.

Each finger has three actuated joints (MCP roll, MCP pitch, PIP) and a DIP
joint slaved to the PIP through a coupling wire.  Angles are radians and
lengths millimetres throughout this module.

Joint order everywhere: ``theta1`` MCP roll, ``theta2`` MCP pitch,
``theta3`` PIP, ``theta4`` DIP.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, LimitError, NoRootError, ParseError

_ARCCOS_SLACK = 1e-12
_LIMIT_SLACK = 1e-12


@dataclass(frozen=True)
class DhRow:
    theta_offset: float = 0.0
    d: float = 0.0
    a: float = 0.0
    alpha: float = 0.0

    def __post_init__(self):
        if self.a < 0:
            raise ValueError(f"D-H link length must be non-negative, got {self.a}")


@dataclass(frozen=True)
class CouplingGeometry:
    """Geometry of the PIP-DIP coupling wire.

    r      radius of the PIP pulley edge point C about the PIP centre G1
    l3     distance from the DIP centre G2 to the wire turning point at rest
    s      distance from G2 to the wire crossing point B on the middle phalanx
    gamma  rest angle between the G2-E and G2-B segments

    ``l1_rest`` (the B-E wire span at full extension) follows from the law of
    cosines.  Passing it explicitly checks it against that value.
    """

    r: float
    l3: float
    s: float
    gamma: float
    l1_rest: float = field(default=None)

    def __post_init__(self):
        for name in ("r", "l3", "s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"coupling length {name} must be positive")
        if not 0 < self.gamma < math.pi:
            raise ValueError("gamma must lie strictly between 0 and pi")
        derived = math.sqrt(self.l3**2 + self.s**2 - 2 * self.l3 * self.s * math.cos(self.gamma))
        if self.l1_rest is None:
            object.__setattr__(self, "l1_rest", derived)
        elif not math.isclose(self.l1_rest, derived, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError(
                f"l1_rest={self.l1_rest} inconsistent with law of cosines ({derived})"
            )

    def chord(self, theta3):
        """Wire chord |C D| swept over the PIP pulley."""
        return np.sqrt(2.0 * self.r**2 * (1.0 - np.cos(theta3)))

    def beta(self, theta3):
        """Angle A-G2-B at a given PIP angle (diagnostic; equals gamma - theta4)."""
        return self.gamma - coupled_dip_angle(self, theta3)

    def supports_full_flexion(self) -> bool:
        """True when every PIP angle in [0, pi/2] maps to a DIP angle in [0, pi/2]."""
        # with u = sin(theta3 / 2) the arccos argument is a concave quadratic
        # in u, so its extremes over the range sit at the ends or the vertex
        u_top = math.sin(math.pi / 4)
        u_vertex = self.l1_rest / (2 * self.r)
        probes = [0.0, math.pi / 2]
        if u_vertex < u_top:
            probes.append(2 * math.asin(u_vertex))
        if np.any(np.abs(_cosine_argument(self, np.array(probes))) > 1 + _ARCCOS_SLACK):
            return False
        try:
            top = float(coupled_dip_angle(self, math.pi / 2))
        except DomainError:
            return False
        return top <= min(self.gamma, math.pi / 2)

    def to_dict(self):
        return {"r": self.r, "l3": self.l3, "s": self.s, "gamma_deg": math.degrees(self.gamma)}


DEFAULT_COUPLING = CouplingGeometry(r=3.5, l3=6.0, s=7.0, gamma=math.radians(60.0))


@dataclass(frozen=True)
class Transform4:
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def from_matrix(cls, m) -> "Transform4":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "Transform4") -> "Transform4":
        return Transform4(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, point) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=float) + self.translation

    def is_proper_rotation(self, tol=1e-9) -> bool:
        r = self.rotation
        return bool(
            np.allclose(r.T @ r, np.eye(3), atol=tol) and abs(np.linalg.det(r) - 1.0) <= tol
        )


@dataclass(frozen=True)
class JointAngles:
    theta1: float
    theta2: float
    theta3: float
    theta4: float

    def as_tuple(self):
        return (self.theta1, self.theta2, self.theta3, self.theta4)


# Middle-finger table; all five fingers share it.
DEFAULT_DH = (
    DhRow(a=13.0, alpha=math.pi / 2),
    DhRow(a=18.0),
    DhRow(a=17.5),
    DhRow(a=18.0),
)

DEFAULT_LIMITS_DEG = ((-90.0, 90.0), (0.0, 90.0), (0.0, 90.0), (0.0, 90.0))


@dataclass(frozen=True)
class FingerModel:
    dh: tuple = DEFAULT_DH
    coupling: CouplingGeometry = DEFAULT_COUPLING
    limits: np.ndarray = field(default_factory=lambda: np.radians(DEFAULT_LIMITS_DEG))

    def __post_init__(self):
        object.__setattr__(self, "dh", tuple(self.dh))
        if len(self.dh) != 4:
            raise ValueError(f"finger needs exactly 4 D-H rows, got {len(self.dh)}")
        lim = np.array(self.limits, dtype=float)
        if lim.shape != (4, 2):
            raise ValueError(f"limits must be 4 [min, max] pairs, got shape {lim.shape}")
        if np.any(lim[:, 0] > lim[:, 1]):
            raise ValueError("joint limit interval is empty")
        lim.setflags(write=False)
        object.__setattr__(self, "limits", lim)

    @property
    def reach(self) -> float:
        """Upper bound on fingertip distance from the base origin."""
        return float(sum(math.hypot(row.a, row.d) for row in self.dh))

    def with_limits(self, limits) -> "FingerModel":
        return FingerModel(self.dh, self.coupling, np.asarray(limits, dtype=float))

    def to_dict(self):
        return {
            "dh": [
                {
                    "theta_offset_deg": math.degrees(row.theta_offset),
                    "d": row.d,
                    "a": row.a,
                    "alpha_deg": math.degrees(row.alpha),
                }
                for row in self.dh
            ],
            "coupling": self.coupling.to_dict(),
            "limits_deg": np.degrees(self.limits).tolist(),
        }

    @classmethod
    def from_dict(cls, doc) -> "FingerModel":
        unknown = set(doc) - {"dh", "coupling", "limits_deg"}
        if unknown:
            raise ParseError(f"unknown finger model keys: {sorted(unknown)}")
        dh = DEFAULT_DH
        if "dh" in doc:
            dh = tuple(_parse_dh_row(row) for row in doc["dh"])
        coupling = DEFAULT_COUPLING
        if "coupling" in doc:
            c = doc["coupling"]
            coupling = CouplingGeometry(
                r=float(c["r"]),
                l3=float(c["l3"]),
                s=float(c["s"]),
                gamma=math.radians(float(c["gamma_deg"])),
            )
        limits = np.radians(doc.get("limits_deg", DEFAULT_LIMITS_DEG))
        return cls(dh, coupling, limits)


def _parse_dh_row(row) -> DhRow:
    if isinstance(row, (list, tuple)):
        if len(row) != 4:
            raise ParseError(f"D-H row needs 4 values [theta_offset_deg, d, a, alpha_deg]: {row}")
        theta, d, a, alpha = (float(v) for v in row)
    else:
        theta = float(row.get("theta_offset_deg", 0.0))
        d = float(row.get("d", 0.0))
        a = float(row["a"])
        alpha = float(row.get("alpha_deg", 0.0))
    return DhRow(math.radians(theta), d, a, math.radians(alpha))


def load_finger_model(path) -> FingerModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, path=path) from exc
    try:
        return FingerModel.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            exc.path = path
            raise
        raise ParseError(f"invalid finger model: {exc}", path=path) from exc


def dh_transform(row: DhRow, theta: float) -> Transform4:
    """RotZ(theta) . TransZ(d) . TransX(a) . RotX(alpha)."""
    return Transform4.from_matrix(_dh_matrices(row, np.asarray(theta, dtype=float)))


def _dh_matrices(row: DhRow, theta: np.ndarray) -> np.ndarray:
    th = theta + row.theta_offset
    ct, st = np.cos(th), np.sin(th)
    ca, sa = math.cos(row.alpha), math.sin(row.alpha)
    # exact zeros for the common right angles keep the chain free of 6e-17 noise
    if abs(ca) < 1e-15:
        ca = 0.0
    if abs(sa) < 1e-15:
        sa = 0.0
    m = np.zeros(th.shape + (4, 4))
    m[..., 0, 0] = ct
    m[..., 0, 1] = -st * ca
    m[..., 0, 2] = st * sa
    m[..., 0, 3] = row.a * ct
    m[..., 1, 0] = st
    m[..., 1, 1] = ct * ca
    m[..., 1, 2] = -ct * sa
    m[..., 1, 3] = row.a * st
    m[..., 2, 1] = sa
    m[..., 2, 2] = ca
    m[..., 2, 3] = row.d
    m[..., 3, 3] = 1.0
    return m


def _cosine_argument(geom: CouplingGeometry, theta3):
    c1 = geom.l3**2 + geom.s**2 - geom.l1_rest**2 - 2 * geom.r**2
    num = c1 + 2 * geom.l1_rest * geom.chord(theta3) + 2 * geom.r**2 * np.cos(theta3)
    return num / (2 * geom.l3 * geom.s)


def coupled_dip_angle(geom: CouplingGeometry, theta3):
    """DIP angle produced by the coupling wire for a PIP angle (closed form).

    Accepts scalars or arrays.  Raises :class:`DomainError` when the geometry
    cannot reach the pose.
    """
    t3 = np.asarray(theta3, dtype=float)
    if np.any(t3 < -_LIMIT_SLACK) or np.any(t3 > math.pi / 2 + _LIMIT_SLACK):
        raise DomainError("PIP angle outside [0, pi/2]")
    arg = _cosine_argument(geom, t3)
    if np.any(np.abs(arg) > 1 + _ARCCOS_SLACK):
        raise DomainError("arccos argument outside [-1, 1]: wire too short for this pose")
    out = geom.gamma - np.arccos(np.clip(arg, -1.0, 1.0))
    return float(out) if out.ndim == 0 else out


def coupling_oracle(geom: CouplingGeometry, theta3, tol: float = 1e-12):
    """DIP angle by bisection on conservation of coupling-wire length.

    Builds the points explicitly (C, D about G1; B, A about G2) and finds the
    DIP rotation at which the swept chord |C D| plus the remaining span |B A|
    equals the rest span |B E|.  Independent of the closed form.
    """
    t3 = np.atleast_1d(np.asarray(theta3, dtype=float))
    if np.any(t3 < -_LIMIT_SLACK) or np.any(t3 > math.pi / 2 + _LIMIT_SLACK):
        raise DomainError("PIP angle outside [0, pi/2]")
    r, l3, s, gamma = geom.r, geom.l3, geom.s, geom.gamma

    # rest wire span B-E, measured from coordinates
    e_pt = (l3 * math.cos(gamma), l3 * math.sin(gamma))
    rest = math.hypot(e_pt[0] - s, e_pt[1])
    chord = np.hypot(r * np.cos(t3) - r, r * np.sin(t3))

    def residual(theta4):
        ax = l3 * np.cos(gamma - theta4)
        ay = l3 * np.sin(gamma - theta4)
        return chord + np.hypot(ax - s, ay) - rest

    # |B A| shrinks monotonically while A-G2-B closes towards zero
    lo = np.zeros_like(t3)
    hi = np.full_like(t3, min(gamma, math.pi / 2))
    if np.any(residual(hi) > 0):
        raise NoRootError("coupling wire cannot shorten enough within [0, pi/2]")
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        pos = residual(mid) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    root = 0.5 * (lo + hi)
    return float(root[0]) if np.ndim(theta3) == 0 else root


def random_valid_geometry(rng, max_tries: int = 10_000) -> CouplingGeometry:
    """Draw finger-scale coupling geometry that supports full PIP flexion.

    ``rng`` is any object with ``uniform(low, high)`` (e.g. :class:`CounterRng`).
    """
    for _ in range(max_tries):
        geom = CouplingGeometry(
            r=rng.uniform(2.0, 5.0),
            l3=rng.uniform(4.0, 9.0),
            s=rng.uniform(4.0, 9.0),
            gamma=math.radians(rng.uniform(40.0, 120.0)),
        )
        if geom.supports_full_flexion():
            return geom
    raise RuntimeError("no valid coupling geometry found")


def _check_limits(model: FingerModel, angles) -> None:
    names = ("MCP roll", "MCP pitch", "PIP", "DIP")
    for k, value in enumerate(angles):
        lo, hi = model.limits[k]
        v = np.asarray(value)
        if np.any(v < lo - _LIMIT_SLACK) or np.any(v > hi + _LIMIT_SLACK):
            raise LimitError(
                f"{names[k]} angle outside [{math.degrees(lo):.3f}, {math.degrees(hi):.3f}] deg"
            )


def joint_angles(model: FingerModel, theta1, theta2, theta3) -> JointAngles:
    theta4 = coupled_dip_angle(model.coupling, theta3)
    angles = JointAngles(float(theta1), float(theta2), float(theta3), float(theta4))
    _check_limits(model, angles.as_tuple())
    return angles


def forward_kinematics(model: FingerModel, theta1, theta2, theta3) -> Transform4:
    """Fingertip pose in the base (MCP roll) frame; DIP follows the coupling."""
    q = joint_angles(model, theta1, theta2, theta3)
    out = Transform4(np.eye(3), np.zeros(3))
    for row, theta in zip(model.dh, q.as_tuple()):
        out = out @ dh_transform(row, theta)
    return out


def fingertip_positions(model: FingerModel, theta1, theta2, theta3) -> np.ndarray:
    """Vectorised fingertip positions, shape ``(n, 3)``, for arrays of angles."""
    t1, t2, t3 = (np.atleast_1d(np.asarray(t, dtype=float)) for t in (theta1, theta2, theta3))
    t4 = np.atleast_1d(coupled_dip_angle(model.coupling, t3))
    _check_limits(model, (t1, t2, t3, t4))
    chain = None
    for row, theta in zip(model.dh, (t1, t2, t3, t4)):
        m = _dh_matrices(row, theta)
        chain = m if chain is None else chain @ m
    return chain[:, :3, 3].copy()


MU1 = 18.0
MU2 = 13.0


def end_effector_vector(theta1, theta2, theta3, theta4) -> np.ndarray:
    """Six-component end-effector descriptor, evaluated literally.

    Components 1, 3 and 5 are structurally zero.  Only the zero pose is known
    to agree with :func:`forward_kinematics`.
    """
    c1, s1 = math.cos(theta1), math.sin(theta1)
    c2, s2 = math.cos(theta2), math.sin(theta2)
    c3, s3 = math.cos(theta3), math.sin(theta3)
    sigma1 = c1 * c2 - s1 * s2
    sigma2 = c1 * s2 + s1 * c2
    sigma3 = 18 * c1 + 35 * c1 * c2 / 2 - 35 * s1 * s2 / 2
    sigma4 = -18 * s1 + 35 * c1 * s2 / 2 - 35 * s1 * c2 / 2
    return np.array(
        [
            sigma3 + MU1 * c3 * sigma1 - MU1 * s3 * sigma2 + MU2,
            0.0,
            sigma4 - MU1 * c3 * sigma2 - MU1 * s3 * sigma1,
            0.0,
            math.exp(theta4 / math.pi),
            0.0,
        ]
    )
