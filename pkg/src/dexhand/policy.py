"""Behaviour-cloning CNN: image in, 15 joint-command probabilities out.

Pure numpy.  Layout is NHWC; convolutions are 5x5, stride 2, padding 2, so
each one halves the spatial size (rounding up).  Three conv layers feed three
dense layers, the last of which has a sigmoid per joint.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import EmptyDatasetError, ParseError, ShapeError
from .rng import CounterRng

N_OUTPUTS = 15


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple = (160, 320, 3)
    conv_channels: tuple = (8, 16, 32)
    kernel: int = 5
    stride: int = 2
    dense: tuple = (128, 64)
    outputs: int = N_OUTPUTS
    dtype: str = "float32"

    @property
    def padding(self) -> int:
        return self.kernel // 2

    def conv_shapes(self):
        """Spatial (h, w) after each conv layer."""
        h, w = self.input_shape[:2]
        out = []
        for _ in self.conv_channels:
            h = (h + 2 * self.padding - self.kernel) // self.stride + 1
            w = (w + 2 * self.padding - self.kernel) // self.stride + 1
            out.append((h, w))
        return out

    @property
    def flat_features(self) -> int:
        h, w = self.conv_shapes()[-1]
        return h * w * self.conv_channels[-1]

    def param_shapes(self):
        shapes = {}
        cin = self.input_shape[2]
        for i, cout in enumerate(self.conv_channels, 1):
            shapes[f"conv{i}.w"] = (self.kernel, self.kernel, cin, cout)
            shapes[f"conv{i}.b"] = (cout,)
            cin = cout
        fin = self.flat_features
        for i, fout in enumerate(self.dense + (self.outputs,), 1):
            shapes[f"dense{i}.w"] = (fin, fout)
            shapes[f"dense{i}.b"] = (fout,)
            fin = fout
        return shapes

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, doc) -> "ModelSpec":
        doc = dict(doc)
        for key in ("input_shape", "conv_channels", "dense"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


TINY_SPEC = ModelSpec(input_shape=(8, 16, 3), conv_channels=(2, 3, 4), dense=(6, 5), dtype="float64")


@dataclass
class CnnModel:
    spec: ModelSpec
    params: dict

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if set(expected) != set(self.params):
            raise ShapeError("parameter names do not match the model spec")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {self.params[name].shape}")

    @classmethod
    def zeros(cls, spec: ModelSpec = ModelSpec()) -> "CnnModel":
        return cls(spec, {k: np.zeros(s, dtype=spec.dtype) for k, s in spec.param_shapes().items()})

    @classmethod
    def initialise(cls, spec: ModelSpec = ModelSpec(), seed: int = 0) -> "CnnModel":
        """He-normal weights for relu layers, zero biases; deterministic in ``seed``."""
        rng = CounterRng(seed, stream=41)
        params = {}
        for name, shape in spec.param_shapes().items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape, dtype=spec.dtype)
                continue
            fan_in = int(np.prod(shape[:-1]))
            w = rng.normal(int(np.prod(shape))) * np.sqrt(2.0 / fan_in)
            params[name] = w.reshape(shape).astype(spec.dtype)
        return cls(spec, params)

    def copy(self) -> "CnnModel":
        return CnnModel(self.spec, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "CnnModel":
        spec = ModelSpec.from_dict({**self.spec.to_dict(), "dtype": np.dtype(dtype).name})
        return CnnModel(spec, {k: v.astype(dtype) for k, v in self.params.items()})


# --- layers -----------------------------------------------------------------


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def _conv_forward(x, w, b, stride, pad):
    n, _, _, cin = x.shape
    k, cout = w.shape[0], w.shape[3]
    xp = _pad(x, pad)
    hp, wp = xp.shape[1:3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    s = xp.strides
    patches = as_strided(
        xp, (n, ho, wo, k, k, cin), (s[0], stride * s[1], stride * s[2], s[1], s[2], s[3]),
        writeable=False,
    )
    cols = patches.reshape(n * ho * wo, k * k * cin)
    out = (cols @ w.reshape(-1, cout)).reshape(n, ho, wo, cout)
    out += b
    return out, cols


def _conv_backward(dout, cols, x_shape, w, stride, pad, need_dx=True):
    n, h, wd, cin = x_shape
    k, cout = w.shape[0], w.shape[3]
    _, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    # one small product per kernel offset keeps every write contiguous in dout
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            part = (d2 @ w[i, j].T).reshape(n, ho, wo, cin)
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += part
    return dxp[:, pad:pad + h, pad:pad + wd, :], dw, db


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check_input(spec: ModelSpec, x):
    x = np.asarray(x)
    if x.shape == spec.input_shape:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise ShapeError(f"expected input {spec.input_shape}, got {x.shape}")
    return x.astype(spec.dtype, copy=False)


def _forward(model: CnnModel, x, keep=False):
    spec, p = model.spec, model.params
    cache = []
    h = x
    for i in range(1, len(spec.conv_channels) + 1):
        z, cols = _conv_forward(h, p[f"conv{i}.w"], p[f"conv{i}.b"], spec.stride, spec.padding)
        if keep:
            cache.append((h.shape, cols, z))
        h = np.maximum(z, 0)
    conv_out_shape = h.shape
    h = h.reshape(len(h), -1)
    n_dense = len(spec.dense) + 1
    for i in range(1, n_dense + 1):
        z = h @ p[f"dense{i}.w"] + p[f"dense{i}.b"]
        if keep:
            cache.append((h, z))
        h = np.maximum(z, 0) if i < n_dense else z
    return h, (cache, conv_out_shape)


def logits(model: CnnModel, x) -> np.ndarray:
    x = _check_input(model.spec, x)
    z, _ = _forward(model, x)
    return z


def forward(model: CnnModel, x) -> np.ndarray:
    """Probabilities for one image ``(15,)`` or a batch ``(n, 15)``."""
    single = np.asarray(x).shape == model.spec.input_shape
    p = _sigmoid(logits(model, x))
    return p[0] if single else p


def _bce_from_logits(z, y):
    # log(1 + exp(z)) - y z, evaluated without overflow
    return np.maximum(z, 0) - y * z + np.log1p(np.exp(-np.abs(z)))


def loss_and_grad(model: CnnModel, x, y):
    """Mean binary cross-entropy over the batch and all outputs, with gradients."""
    spec, p = model.spec, model.params
    x = _check_input(spec, x)
    y = np.asarray(y, dtype=spec.dtype)
    if y.shape != (len(x), spec.outputs):
        raise ShapeError(f"labels must have shape ({len(x)}, {spec.outputs})")
    if len(x) == 0:
        raise ShapeError("empty batch")
    z, (cache, conv_out_shape) = _forward(model, x, keep=True)
    loss = float(_bce_from_logits(z, y).mean())

    grads = {}
    n_conv = len(spec.conv_channels)
    n_dense = len(spec.dense) + 1
    dz = ((_sigmoid(z) - y) / y.size).astype(spec.dtype)
    for i in range(n_dense, 0, -1):
        h_in, _ = cache[n_conv + i - 1]
        grads[f"dense{i}.w"] = h_in.T @ dz
        grads[f"dense{i}.b"] = dz.sum(axis=0)
        dh = dz @ p[f"dense{i}.w"].T
        if i > 1:
            dz = dh * (cache[n_conv + i - 2][1] > 0)
    dh = dh.reshape(conv_out_shape)
    for i in range(n_conv, 0, -1):
        x_shape, cols, zc = cache[i - 1]
        dzc = dh * (zc > 0)
        dh, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = _conv_backward(
            dzc, cols, x_shape, p[f"conv{i}.w"], spec.stride, spec.padding, need_dx=i > 1
        )
    return loss, grads


def numeric_grad(model: CnnModel, x, y, name: str, index, eps: float = 1e-6) -> float:
    """Central finite difference of the loss w.r.t. one parameter entry."""
    probe = model.copy()
    w = probe.params[name]
    orig = w[index]
    w[index] = orig + eps
    lp, _ = loss_and_grad(probe, x, y)
    w[index] = orig - eps
    lm, _ = loss_and_grad(probe, x, y)
    return (lp - lm) / (2 * eps)


def predict_commands(model: CnnModel, image) -> np.ndarray:
    """Binary commands; a probability of exactly 0.5 holds the joint (0)."""
    return (forward(model, image) > 0.5).astype(np.uint8)


# --- optimiser --------------------------------------------------------------


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params) -> dict:
    return {"m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def adam_update(params, grads, opt_state, step: int, cfg: AdamConfig = AdamConfig()):
    """Bias-corrected Adam.  Returns ``(new_params, new_state)``; inputs untouched."""
    if step < 1:
        raise ValueError("Adam step count starts at 1")
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1 - cfg.beta1**step
    c2 = 1 - cfg.beta2**step
    for k, w in params.items():
        g = grads[k]
        m = cfg.beta1 * opt_state["m"][k] + (1 - cfg.beta1) * g
        v = cfg.beta2 * opt_state["v"][k] + (1 - cfg.beta2) * g * g
        new_p[k] = (w - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(w.dtype)
        new_m[k], new_v[k] = m, v
    return new_p, {"m": new_m, "v": new_v}


# --- training ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 75
    epochs: int = 45
    steps_per_epoch: int = 45
    seed: int = 0
    augment_prob: float = 0.5
    luminance_range: tuple = (0.2, 1.2)
    model: ModelSpec = field(default_factory=ModelSpec)

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("invalid training configuration")
        lo, hi = self.luminance_range
        if not 0 < lo <= hi:
            raise ValueError("luminance range must satisfy 0 < low <= high")

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.lr, self.beta1, self.beta2, self.eps)

    def to_dict(self):
        d = asdict(self)
        d["luminance_range"] = list(self.luminance_range)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, doc) -> "TrainConfig":
        doc = dict(doc)
        if "model" in doc:
            doc["model"] = ModelSpec.from_dict(doc["model"])
        if "luminance_range" in doc:
            doc["luminance_range"] = tuple(doc["luminance_range"])
        return cls(**doc)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainReport:
    epoch_loss: list
    joint_accuracy: np.ndarray
    config_hash: str
    seed: int

    def to_dict(self):
        return {
            "epoch_loss": [float(v) for v in self.epoch_loss],
            "joint_accuracy": [float(v) for v in self.joint_accuracy],
            "config_hash": self.config_hash,
            "seed": self.seed,
        }


def augment_batch(x, rng: CounterRng, cfg: TrainConfig):
    """Luminance jitter on the Y channel of preprocessed YUV tensors."""
    n = len(x)
    apply = rng.random(n) < cfg.augment_prob
    factors = rng.uniform(cfg.luminance_range[0], cfg.luminance_range[1], n)
    if not apply.any():
        return x, np.ones(n)
    factors = np.where(apply, factors, 1.0)
    out = x.copy()
    out[..., 0] = np.clip(out[..., 0] * factors[:, None, None].astype(x.dtype), 0.0, 1.0)
    return out, factors


def train(dataset, cfg: TrainConfig = TrainConfig(), callback=None):
    """Fit a fresh model to ``dataset`` (anything with ``inputs`` and ``labels``).

    Each epoch runs ``steps_per_epoch`` minibatches drawn from a seeded
    shuffle that is refilled whenever it runs out.  Returns ``(model, report)``;
    the report's accuracy is measured on the final epoch's batches just before
    each update.
    """
    inputs, labels = dataset.inputs, dataset.labels
    n = len(inputs)
    if n == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    spec = cfg.model
    if tuple(inputs.shape[1:]) != spec.input_shape:
        spec = ModelSpec.from_dict({**spec.to_dict(), "input_shape": list(inputs.shape[1:])})
    model = CnnModel.initialise(spec, cfg.seed)
    opt = adam_init(model.params)
    order_rng = CounterRng(cfg.seed, stream=42)
    aug_rng = CounterRng(cfg.seed, stream=43)
    order, cursor = order_rng.permutation(n), 0
    epoch_loss = []
    correct = np.zeros(spec.outputs)
    seen = 0
    step = 0
    for epoch in range(cfg.epochs):
        total = 0.0
        last = epoch == cfg.epochs - 1
        for _ in range(cfg.steps_per_epoch):
            idx = []
            while len(idx) < min(cfg.batch_size, n):
                take = order[cursor:cursor + min(cfg.batch_size, n) - len(idx)]
                idx.extend(take.tolist())
                cursor += len(take)
                if cursor >= n:
                    order, cursor = order_rng.permutation(n), 0
            idx = np.sort(np.array(idx))
            xb, _ = augment_batch(np.asarray(inputs[idx], dtype=spec.dtype), aug_rng, cfg)
            yb = np.asarray(labels[idx], dtype=spec.dtype)
            loss, grads = loss_and_grad(model, xb, yb)
            if last:
                z, _ = _forward(model, xb)
                correct += ((z > 0).astype(spec.dtype) == yb).sum(axis=0)
                seen += len(xb)
            step += 1
            model.params, opt = adam_update(model.params, grads, opt, step, cfg.adam)
            total += loss
        epoch_loss.append(total / cfg.steps_per_epoch)
        if callback is not None:
            callback(epoch, epoch_loss[-1])
    accuracy = correct / seen if seen else np.zeros(spec.outputs)
    return model, TrainReport(epoch_loss, accuracy, cfg.digest(), cfg.seed)


def joint_accuracy(model: CnnModel, inputs, labels, batch: int = 64) -> np.ndarray:
    """Fraction of correct bits per joint."""
    hits = np.zeros(model.spec.outputs)
    for start in range(0, len(inputs), batch):
        z = logits(model, np.asarray(inputs[start:start + batch]))
        hits += ((z > 0) == (np.asarray(labels[start:start + batch]) > 0)).sum(axis=0)
    return hits / max(len(inputs), 1)


# --- checkpoints ------------------------------------------------------------

MAGIC = b"DXHCNN\x00\x01"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {"float32": 1, "float64": 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(model: CnnModel, path, hyperparameters=None) -> Path:
    """Binary tensors plus a JSON sidecar (``<path>.json``).

    Layout, little-endian: MAGIC, u32 version, u32 tensor count, then per
    tensor: u16 name length, utf-8 name, u8 dtype code, u8 ndim, u32 dims,
    raw data.
    """
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(model.params))]
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name])
        code = _DTYPE_CODES[arr.dtype.name]
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    path.write_bytes(b"".join(chunks))
    sidecar = {"format_version": CHECKPOINT_VERSION, "model": model.spec.to_dict()}
    if hyperparameters is not None:
        sidecar["hyperparameters"] = hyperparameters
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> CnnModel:
    path = Path(path)
    blob = path.read_bytes()
    if not blob.startswith(MAGIC):
        raise ParseError("not a model checkpoint (bad magic)", path=path)
    off = len(MAGIC)
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", path=path)
    params = {}
    for _ in range(count):
        (length,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + length].decode()
        off += length
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        dtype = np.dtype(_CODE_DTYPES[code]).newbyteorder("<")
        size = int(np.prod(shape)) * dtype.itemsize
        params[name] = np.frombuffer(blob, dtype, count=int(np.prod(shape)), offset=off) \
            .reshape(shape).astype(dtype.newbyteorder("="))
        off += size
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    return CnnModel(ModelSpec.from_dict(sidecar["model"]), params)
