"""Strict JSON configuration for the command-line tools.

Every section is optional; missing keys take the values in ``DEFAULTS``.
Unknown keys are rejected rather than silently ignored, since a misspelt
gain would otherwise leave the default in force.
"""

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .control import DEFAULT_THRESHOLD_DEG, INTEGRAL_LIMIT, PidGains
from .demodata import PreprocessConfig
from .errors import ParseError, UnknownKeyError
from .kinematics import FingerModel, load_finger_model
from .policy import TrainConfig
from .simplant import HandPlant

SEED_ENV = "DEXHAND_SEED"

DEFAULTS = {
    "finger_model": None,
    "plant": {"gain": 90.0, "spring_rate": 2.0, "rest_angle": 0.0},
    "pid": {"kp": 0.5, "ki": 0.1, "kd": 0.0, "integral_limit": INTEGRAL_LIMIT},
    "preprocess": {"to_yuv": True, "blur_sigma": 1.0, "normalize": True, "luminance_range": [0.2, 1.2]},
    "train": {
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "batch_size": 75,
        "epochs": 45,
        "steps_per_epoch": 45,
        "augment_prob": 0.5,
    },
    "binarize": {"threshold_deg": DEFAULT_THRESHOLD_DEG},
    "seeds": {"workspace": 0, "demo": 0, "train": 0, "eval": 0},
}


@dataclass(frozen=True)
class Config:
    finger: FingerModel
    plant: HandPlant
    gains: PidGains
    preprocess: PreprocessConfig
    train: TrainConfig
    threshold_deg: float
    seeds: dict
    doc: dict  # effective values, for --print-config

    def seed(self, name: str, flag=None) -> int:
        """Flag value, else ``$DEXHAND_SEED``, else the config's seed."""
        if flag is not None:
            return int(flag)
        env = os.environ.get(SEED_ENV)
        if env not in (None, ""):
            try:
                return int(env)
            except ValueError:
                raise ParseError(f"{SEED_ENV} must be an integer, got {env!r}") from None
        return int(self.seeds[name])

    def dumps(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True)


def _merge(defaults: dict, given: dict, section: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise UnknownKeyError(key, section)
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ParseError(f"{section}.{key} must be an object")
            out[key] = _merge(defaults[key], value, f"{section}.{key}")
        else:
            out[key] = value
    return out


def build_config(doc: dict = None, base_dir=None) -> Config:
    doc = {} if doc is None else doc
    if not isinstance(doc, dict):
        raise ParseError("config must be a JSON object")
    eff = _merge(DEFAULTS, doc, "config")
    try:
        finger = FingerModel()
        if eff["finger_model"] is not None:
            path = Path(eff["finger_model"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            if not path.exists():
                raise ParseError(f"finger model file not found: {path}")
            finger = load_finger_model(path)
        plant = HandPlant.default(**eff["plant"])
        pid = eff["pid"]
        gains = PidGains(kp=pid["kp"], ki=pid["ki"], kd=pid["kd"], integral_limit=pid["integral_limit"])
        pre = dict(eff["preprocess"])
        pre["luminance_range"] = tuple(pre["luminance_range"])
        preprocess = PreprocessConfig(**pre)
        train = TrainConfig(**eff["train"], luminance_range=preprocess.luminance_range)
        threshold = float(eff["binarize"]["threshold_deg"])
        if threshold <= 0:
            raise ValueError("binarize.threshold_deg must be positive")
    except ParseError:
        raise
    except (TypeError, ValueError) as exc:
        raise ParseError(f"invalid config value: {exc}") from None
    return Config(finger, plant, gains, preprocess, train, threshold, dict(eff["seeds"]), eff)


def load_config(path) -> Config:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, path=path) from None
    try:
        return build_config(doc, base_dir=path.parent)
    except ParseError as exc:
        exc.path = exc.path or path
        raise
