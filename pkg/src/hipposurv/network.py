"""Two-stream 3D residual network for AD/NC classification and feature extraction.

Each stream (left and right hippocampus) is::

    conv -> BN -> ReLU -> pool -> ResBlock1 -> pool -> ResBlock2 -> pool -> ResBlock3 -> GAP

with ``ResBlock = conv -> BN -> ReLU -> conv -> BN (+ skip) -> ReLU``; the skip is
a 1x1x1 convolution when the channel count changes. The two GAP vectors are
concatenated, passed through dropout and a fully connected layer giving two
logits (NC, AD). The concatenated GAP vector is the feature vector used by the
survival models.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from scipy import ndimage

from . import layers as L
from .errors import ConfigError, LoadError, PreconditionError, ShapeError, TrainingError
from .records import AD_CLASS, CLASS_INDEX
from .volume import Volume, _zscore

STREAMS = ("left", "right")
MODEL_MAGIC = b"HPNET1"
MODEL_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    stem_kernels: int = 32
    block_kernels: tuple = (32, 64, 128)
    kernel_size: tuple = (3, 3, 3)
    # stage 0 is the stem, stages 1-3 the residual blocks
    pool_after: tuple = (0, 1, 2)
    dropout_ratio: float = 0.5
    num_classes: int = 2
    input_dims: tuple = (29, 21, 55)
    scale_factor: Fraction = Fraction(1)

    def __post_init__(self):
        object.__setattr__(self, "scale_factor", Fraction(self.scale_factor).limit_denominator(1 << 16))
        for name in ("block_kernels", "kernel_size", "pool_after", "input_dims"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        if len(self.block_kernels) != 3:
            raise ConfigError("exactly three residual blocks are supported")
        if self.scale_factor <= 0:
            raise ConfigError("scale_factor must be positive")
        if not 0 <= self.dropout_ratio < 1:
            raise ConfigError("dropout_ratio must lie in [0, 1)")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_size):
            raise ConfigError("kernel sizes must be odd and positive")
        if any(s not in (0, 1, 2, 3) for s in self.pool_after):
            raise ConfigError("pool_after holds stage indices 0..3")
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ConfigError("input_dims needs three positive entries")
        for dims in self.stage_dims():
            if min(dims) < 1:
                raise ConfigError(f"input {self.input_dims} collapses below one voxel after pooling")

    def _scale(self, c):
        return max(1, math.floor(Fraction(c) * self.scale_factor + Fraction(1, 2)))

    @property
    def stem_channels(self) -> int:
        return self._scale(self.stem_kernels)

    @property
    def block_channels(self) -> tuple:
        return tuple(self._scale(c) for c in self.block_kernels)

    @property
    def feature_dim(self) -> int:
        return 2 * self.block_channels[-1]

    def stage_dims(self):
        """Spatial dims at the input of each stage 0..3 and after the last one."""
        dims = [self.input_dims]
        cur = self.input_dims
        for stage in range(4):
            if stage in self.pool_after:
                if min(cur) < 2:
                    return dims + [(0, 0, 0)]
                cur = tuple(d // 2 for d in cur)
            dims.append(cur)
        return dims

    @property
    def last_stage_dims(self):
        return self.stage_dims()[-1]

    def to_dict(self):
        return {
            "stem_kernels": self.stem_kernels,
            "block_kernels": list(self.block_kernels),
            "kernel_size": list(self.kernel_size),
            "pool_after": list(self.pool_after),
            "dropout_ratio": self.dropout_ratio,
            "num_classes": self.num_classes,
            "input_dims": list(self.input_dims),
            "scale_factor": str(self.scale_factor),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["scale_factor"] = Fraction(d.get("scale_factor", "1"))
        return cls(**d)


@dataclass
class NetworkParams:
    """Learnable arrays plus batch-norm running statistics, keyed by name."""

    config: NetConfig
    arrays: dict

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def learnable(self):
        return [k for k in self.arrays if not k.endswith(("running_mean", "running_var"))]

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})


@dataclass(frozen=True)
class TrainSchedule:
    base_lr: float = 0.01
    momentum: float = 0.9
    step_size: int = 20000
    gamma: float = 0.1
    max_iters: int = 100000
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not (self.base_lr > 0 and self.momentum >= 0 and self.step_size > 0 and self.max_iters > 0):
            raise ConfigError("schedule values must be positive")
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch norm)")


@dataclass
class FeatureVector:
    values: np.ndarray
    subject_id: str | None = None


@dataclass
class Checkpoint:
    step: int
    auc: float
    params: NetworkParams


# --------------------------------------------------------------------------- construction


def param_shapes(config: NetConfig) -> dict:
    """Name -> shape for every array of a network built from ``config``."""
    k = config.kernel_size
    shapes = {}

    def bn(prefix, c):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            shapes[f"{prefix}.{name}"] = (c,)

    c0 = config.stem_channels
    for s in STREAMS:
        shapes[f"{s}.stem.conv.w"] = (c0, 1) + k
        shapes[f"{s}.stem.conv.b"] = (c0,)
        bn(f"{s}.stem.bn", c0)
        cin = c0
        for i, cout in enumerate(config.block_channels, start=1):
            p = f"{s}.block{i}"
            shapes[f"{p}.conv1.w"] = (cout, cin) + k
            shapes[f"{p}.conv1.b"] = (cout,)
            bn(f"{p}.bn1", cout)
            shapes[f"{p}.conv2.w"] = (cout, cout) + k
            shapes[f"{p}.conv2.b"] = (cout,)
            bn(f"{p}.bn2", cout)
            if cin != cout:
                shapes[f"{p}.proj.w"] = (cout, cin, 1, 1, 1)
                shapes[f"{p}.proj.b"] = (cout,)
            cin = cout
    shapes["fc.w"] = (config.num_classes, config.feature_dim)
    shapes["fc.b"] = (config.num_classes,)
    return shapes


def build_network(config: NetConfig, rng=None) -> NetworkParams:
    """He-normal weights (std sqrt(2/fan_in)), zero biases, BN gamma 1 / beta 0."""
    rng = np.random.default_rng(rng)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.endswith((".gamma", ".running_var")):
            arrays[name] = np.ones(shape, np.float32)
        elif name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            arrays[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)
        else:
            arrays[name] = np.zeros(shape, np.float32)
    return NetworkParams(config, arrays)


# --------------------------------------------------------------------------- forward / backward


def _same_pad(config):
    return tuple(k // 2 for k in config.kernel_size)


def _bn_state(arrays, prefix):
    return L.BatchNormState(arrays[f"{prefix}.running_mean"], arrays[f"{prefix}.running_var"])


def _conv_bn(arrays, x, conv, bn, pad, mode, tape):
    h, ccache = L.conv3d_forward(x, arrays[f"{conv}.w"], arrays[f"{conv}.b"], pad)
    out, bcache = L.batch_norm_forward(h, arrays[f"{bn}.gamma"], arrays[f"{bn}.beta"], _bn_state(arrays, bn), mode)
    tape.append(("conv_bn", conv, bn, ccache, bcache))
    return out


def _stream_forward(params, s, x, mode, tape):
    """Returns the final post-ReLU map of stream ``s``; records each step on ``tape``."""
    cfg, a = params.config, params.arrays
    pad = _same_pad(cfg)
    h = _conv_bn(a, x, f"{s}.stem.conv", f"{s}.stem.bn", pad, mode, tape)
    h = L.relu(h)
    tape.append(("relu", h))
    for stage in range(4):
        if stage > 0:
            p = f"{s}.block{stage}"
            inp = h
            tape.append(("block_start",))
            r = _conv_bn(a, inp, f"{p}.conv1", f"{p}.bn1", pad, mode, tape)
            r = L.relu(r)
            tape.append(("relu", r))
            r = _conv_bn(a, r, f"{p}.conv2", f"{p}.bn2", pad, mode, tape)
            if f"{p}.proj.w" in a:
                skip, pcache = L.conv3d_forward(inp, a[f"{p}.proj.w"], a[f"{p}.proj.b"])
                tape.append(("block_end", f"{p}.proj", pcache))
            else:
                skip = inp
                tape.append(("block_end", None, None))
            h = L.relu(r + skip)
            tape.append(("relu", h))
        if stage in cfg.pool_after:
            shape = h.shape
            h, arg = L.maxpool3d(h)
            tape.append(("pool", arg, shape))
    return h


def _stream_backward(tape, grad, grads):
    """Walk a stream tape backwards. Returns the gradient reaching the stream input."""
    skip_grads = []
    for entry in reversed(tape):
        kind = entry[0]
        if kind == "pool":
            _, arg, shape = entry
            grad = L.maxpool3d_backward(grad, arg, shape)
        elif kind == "relu":
            grad = L.relu_backward(grad, entry[1])
        elif kind == "block_end":
            _, proj, pcache = entry
            if proj is None:
                skip_grads.append(("identity", grad))
            else:
                dx, dw, db = L.conv3d_backward(grad, pcache)
                grads[f"{proj}.w"] = dw
                grads[f"{proj}.b"] = db
                skip_grads.append(("proj", dx))
        elif kind == "block_start":
            grad = grad + skip_grads.pop()[1]
        elif kind == "conv_bn":
            _, conv, bn, ccache, bcache = entry
            grad, dg, dbeta = L.batch_norm_backward(grad, bcache)
            grads[f"{bn}.gamma"] = dg
            grads[f"{bn}.beta"] = dbeta
            # the stem input is data; skip its input gradient
            need = not conv.endswith("stem.conv")
            grad, dw, db = L.conv3d_backward(grad, ccache, need_input_grad=need)
            grads[f"{conv}.w"] = dw
            grads[f"{conv}.b"] = db
    return grad


@dataclass
class ForwardCache:
    tapes: dict
    final_maps: dict
    features: np.ndarray
    dropped: np.ndarray
    mask: np.ndarray | None


def _as_batch(v, dims):
    if isinstance(v, Volume):
        v = v.data[None]
    v = np.asarray(v)
    if v.ndim == 3:
        v = v[None]
    if v.ndim != 4 or tuple(v.shape[1:]) != tuple(dims):
        raise ShapeError(f"expected volumes of dims {tuple(dims)}, got {v.shape[1:] if v.ndim == 4 else v.shape}")
    return v


def forward(params: NetworkParams, left, right, mode="infer", rng=None):
    """Logits for one pair or a batch of pairs.

    ``left``/``right`` are ``Volume`` objects, single 3D arrays, or stacked
    ``(N, X, Y, Z)`` arrays of normalized intensities. Train mode updates the
    batch-norm running statistics in ``params`` and draws the dropout mask
    from ``rng``. Returns ``(logits (N, num_classes), ForwardCache)``.
    """
    cfg = params.config
    lb = _as_batch(left, cfg.input_dims)
    rb = _as_batch(right, cfg.input_dims)
    if lb.shape[0] != rb.shape[0]:
        raise ShapeError("left and right batches differ in size")
    dtype = np.result_type(lb.dtype, np.float32)
    tapes, maps, feats = {}, {}, []
    for s, vol in zip(STREAMS, (lb, rb)):
        tape = []
        fmap = _stream_forward(params, s, vol.astype(dtype, copy=False)[None], mode, tape)
        tapes[s], maps[s] = tape, fmap
        feats.append(L.gap(fmap))
    features = np.concatenate(feats, axis=1)
    dropped, mask = L.dropout(features, cfg.dropout_ratio, mode, rng)
    logits = L.fully_connected(dropped, params.arrays["fc.w"], params.arrays["fc.b"])
    return logits, ForwardCache(tapes, maps, features, dropped, mask)


def backward(params: NetworkParams, cache: ForwardCache, dlogits) -> dict:
    """Gradients of every learnable array given d(loss)/d(logits)."""
    grads = {}
    dfeat, grads["fc.w"], grads["fc.b"] = L.fully_connected_backward(dlogits, cache.dropped, params.arrays["fc.w"])
    if cache.mask is not None:
        dfeat = dfeat * cache.mask
    c = params.config.block_channels[-1]
    for i, s in enumerate(STREAMS):
        fmap = cache.final_maps[s]
        g = L.gap_backward(np.ascontiguousarray(dfeat[:, i * c : (i + 1) * c]), fmap.shape)
        _stream_backward(cache.tapes[s], g, grads)
    return grads


def loss_and_grads(params, left, right, labels, mode="train", rng=None):
    logits, cache = forward(params, left, right, mode, rng)
    loss, dlogits = L.softmax_cross_entropy(logits, labels)
    return loss, backward(params, cache, dlogits), logits


# --------------------------------------------------------------------------- training


def lr_at_step(schedule: TrainSchedule, step: int) -> float:
    """Step policy: ``base_lr * gamma ** floor(step / step_size)``."""
    if not 0 <= step < schedule.max_iters:
        raise PreconditionError(f"step {step} outside [0, {schedule.max_iters})")
    return schedule.base_lr * schedule.gamma ** (step // schedule.step_size)


def _class_labels(dataset):
    labels = getattr(dataset, "labels", None)
    if labels is None:
        labels = [r.label for r in dataset]
    out = []
    for lab in labels:
        if lab not in CLASS_INDEX:
            raise PreconditionError(f"training labels must be NC or AD, got {lab!r}")
        out.append(CLASS_INDEX[lab])
    return np.asarray(out)


def _pair_batch(records, dtype=np.float32):
    left = np.stack([_zscore(r.left.data) for r in records]).astype(dtype, copy=False)
    right = np.stack([_zscore(r.right.data) for r in records]).astype(dtype, copy=False)
    return left, right


def predict_proba(params, records, chunk=16) -> np.ndarray:
    """AD-class probability per record (infer mode, volumes z-scored)."""
    out = []
    for i in range(0, len(records), chunk):
        left, right = _pair_batch(records[i : i + chunk])
        logits, _ = forward(params, left, right, "infer")
        z = logits.astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        out.append(p[:, AD_CLASS] / p.sum(axis=1))
    return np.concatenate(out) if out else np.zeros(0)


def evaluate_auc(params, records) -> float:
    from .metrics import binary_roc_auc

    labels = _class_labels(records)
    return binary_roc_auc(predict_proba(params, list(records)), labels == AD_CLASS)[1]


def train(params, dataset, schedule: TrainSchedule, eval_set=None, eval_every=2000, progress=None):
    """Mini-batch SGD with momentum on the cross-entropy loss.

    Each batch holds ``batch_size`` draws with replacement, alternating NC and
    AD so both classes are equally represented. ``params`` is updated in
    place. A checkpoint (copy of the parameters plus eval-set AUC) is taken
    every ``eval_every`` iterations and after the last one.

    Returns ``(checkpoints, log)`` where ``log`` has one dict per iteration
    with keys ``step, lr, loss, eval_auc`` (``eval_auc`` is NaN off-checkpoint).
    """
    labels = _class_labels(dataset)
    by_class = [np.flatnonzero(labels == k) for k in range(params.config.num_classes)]
    if any(len(ix) == 0 for ix in by_class):
        raise PreconditionError("training set must contain both NC and AD subjects")
    if eval_every < 1:
        raise PreconditionError("eval_every must be positive")
    rng = np.random.default_rng(schedule.seed)
    names = params.learnable()
    velocity = {k: np.zeros_like(params.arrays[k]) for k in names}
    pattern = np.arange(schedule.batch_size) % params.config.num_classes
    checkpoints, log = [], []
    for step in range(schedule.max_iters):
        lr = lr_at_step(schedule, step)
        picks = [by_class[k][rng.integers(len(by_class[k]))] for k in pattern]
        left, right = _pair_batch([dataset[int(i)] for i in picks])
        loss, grads, _ = loss_and_grads(params, left, right, pattern, "train", rng)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at step {step} (lr={lr:g})")
        for k in names:
            v = velocity[k]
            v *= schedule.momentum
            v -= lr * grads[k]
            params.arrays[k] += v
        row = {"step": step, "lr": lr, "loss": loss, "eval_auc": float("nan")}
        done = step + 1
        if done % eval_every == 0 or done == schedule.max_iters:
            auc = evaluate_auc(params, eval_set) if eval_set else float("nan")
            row["eval_auc"] = auc
            checkpoints.append(Checkpoint(done, auc, params.copy()))
        log.append(row)
        if progress is not None:
            progress(row)
    return checkpoints, log


def select_checkpoint(checkpoints) -> NetworkParams:
    """Checkpoint with the highest eval AUC; the earliest wins ties."""
    best = None
    for ck in checkpoints:
        if math.isfinite(ck.auc) and (best is None or ck.auc > best.auc):
            best = ck
    if best is None:
        raise PreconditionError("no checkpoint with a finite AUC to select from")
    return best.params


# --------------------------------------------------------------------------- features & relevance


def extract_features_batch(params, left, right) -> np.ndarray:
    _, cache = forward(params, left, right, "infer")
    return cache.features


def extract_features(params, left, right, subject_id=None) -> FeatureVector:
    """Concatenated [left GAP, right GAP] of the final post-ReLU maps (infer mode)."""
    return FeatureVector(extract_features_batch(params, left, right)[0], subject_id)


def relevance_map(params, left, right, target=AD_CLASS, native=False):
    """Class activation maps for one pair, one per stream.

    Each map is the sum over final-block channels of the channel's post-ReLU
    map weighted by that channel's FC weight for ``target``. With
    ``native=True`` the maps are returned at last-stage resolution;
    otherwise they are trilinearly upsampled to the input dims.
    """
    cfg = params.config
    _, cache = forward(params, left, right, "infer")
    c = cfg.block_channels[-1]
    w = params.arrays["fc.w"][target].astype(np.float64)
    maps = []
    for i, s in enumerate(STREAMS):
        fmap = cache.final_maps[s][:, 0].astype(np.float64)
        m = np.tensordot(w[i * c : (i + 1) * c], fmap, axes=1)
        if not native:
            m = upsample_trilinear(m, cfg.input_dims)
        maps.append(Volume(m.astype(np.float32)))
    return tuple(maps)


def upsample_trilinear(arr, dims):
    """Resample a coarse grid to ``dims`` treating voxels as cell centers."""
    coords = np.meshgrid(
        *[(np.arange(d) + 0.5) * (s / d) - 0.5 for s, d in zip(arr.shape, dims)], indexing="ij"
    )
    return ndimage.map_coordinates(arr, coords, order=1, mode="nearest")


# --------------------------------------------------------------------------- model file


def save_model(params: NetworkParams, path) -> None:
    """Write an HPNET1 file: magic, version, JSON config, then tagged float32 blocks."""
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<II", MODEL_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params.arrays)))
    for name, arr in params.arrays.items():
        enc = name.encode()
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise LoadError(f"model file truncated while reading {what}", offset=self.pos)
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def load_model(path) -> NetworkParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw)
    magic = r.take(len(MODEL_MAGIC), "magic")
    if magic != MODEL_MAGIC:
        raise LoadError(f"bad model magic {magic!r}, expected {MODEL_MAGIC!r}", offset=0)
    version, cfg_len = r.unpack("<II", "header")
    if version != MODEL_VERSION:
        raise LoadError(f"unsupported model format version {version} (expected {MODEL_VERSION})", offset=6)
    try:
        config = NetConfig.from_dict(json.loads(r.take(cfg_len, "config").decode()))
    except (ValueError, TypeError) as exc:
        raise LoadError(f"unreadable config block: {exc}", offset=14) from exc
    expected = param_shapes(config)
    (count,) = r.unpack("<I", "parameter count")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode()
        (ndim,) = r.unpack("<B", f"{name} rank")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        if name not in expected:
            raise ShapeError(f"model file has unexpected parameter {name!r}")
        if tuple(shape) != tuple(expected[name]):
            raise ShapeError(f"parameter {name} declared {tuple(shape)}, config implies {expected[name]}")
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(4 * size, f"{name} data"), dtype="<f4")
        arrays[name] = data.astype(np.float32).reshape(shape)
    if r.pos != len(raw):
        raise LoadError(f"{len(raw) - r.pos} trailing bytes after last parameter", offset=r.pos)
    missing = set(expected) - set(arrays)
    if missing:
        raise ShapeError(f"model file lacks parameters {sorted(missing)}")
    return NetworkParams(config, {k: arrays[k] for k in expected})
