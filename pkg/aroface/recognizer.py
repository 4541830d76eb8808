"""
Toy face recognizer F = C o E with exact gradients.

E is a small convolutional (or perceptron) extractor followed by a linear map
to d dimensions and l2 normalisation; C is a c x d matrix with unit rows, so
logits are cosines. Losses are cross-entropy over scaled cosines with an
optional additive angular (ArcFace-style) or additive cosine (CosFace-style)
target margin.

Gradients are derived by hand and checked against finite differences in the
test suite.
"""

from __future__ import annotations

import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, Field, model_validator

from aroface.errors import ContractViolation, FileIntegrityError, MissingFileError, NumericalAbort
from aroface.utils import rng as rng_utils

logger = logging.getLogger(__name__)

COS_CLAMP = 1e-7
CHECKPOINT_MAGIC = b"AROCKPT1"


class MarginConfig(BaseModel):
    variant: Literal["softmax", "arcface", "cosface"] = "arcface"
    logit_scale: float = Field(16.0, gt=0.0)
    margin: float = Field(0.2, ge=0.0)

    @model_validator(mode="after")
    def _angular_margin_below_right_angle(self):
        if self.variant == "arcface" and self.margin >= math.pi / 2:
            raise ValueError(f"angular margin must be < pi/2, got {self.margin}")
        return self


class ModelSpec(BaseModel):
    """Extractor architecture; conv stages use 'same' padding and the given stride."""

    kind: Literal["conv", "mlp"] = "conv"
    input_channels: int = Field(1, ge=1)
    height: int = Field(64, ge=1)
    width: int = Field(64, ge=1)
    conv_channels: List[int] = Field(default_factory=lambda: [8, 16])
    kernel_size: int = Field(5, ge=1)
    stride: int = Field(2, ge=1)
    hidden: int = Field(64, ge=1)
    embedding_dim: int = Field(32, ge=1)
    num_classes: int = Field(10, ge=2)

    @model_validator(mode="after")
    def _stage_count(self):
        if self.kind == "conv" and not 2 <= len(self.conv_channels) <= 3:
            raise ValueError(f"conv extractor needs 2-3 stages, got {len(self.conv_channels)}")
        return self

    def stage_sizes(self) -> List[Tuple[int, int]]:
        sizes = []
        h, w = self.height, self.width
        pad = self.kernel_size // 2
        for _ in self.conv_channels:
            h = (h + 2 * pad - self.kernel_size) // self.stride + 1
            w = (w + 2 * pad - self.kernel_size) // self.stride + 1
            sizes.append((h, w))
        return sizes


@dataclass
class ModelParams:
    """Extractor arrays in declaration order plus the unit-row classifier."""

    spec: ModelSpec
    extractor: "OrderedDict[str, np.ndarray]"
    classifier: np.ndarray

    @property
    def d(self) -> int:
        return self.spec.embedding_dim

    @property
    def c(self) -> int:
        return self.spec.num_classes

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict(self.extractor)
        out["classifier.weight"] = self.classifier
        return out

    def replace(self, arrays: Dict[str, np.ndarray]) -> "ModelParams":
        extractor = OrderedDict((name, arrays[name]) for name in self.extractor)
        return ModelParams(self.spec, extractor, arrays["classifier.weight"])

    def copy(self) -> "ModelParams":
        return self.replace({k: v.copy() for k, v in self.arrays().items()})


def _normalize_rows(w: np.ndarray) -> np.ndarray:
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """He-initialised extractor and a random unit-row classifier."""
    gen = rng_utils.stream(seed, "init")
    extractor: "OrderedDict[str, np.ndarray]" = OrderedDict()
    if spec.kind == "conv":
        c_in = spec.input_channels
        for n, c_out in enumerate(spec.conv_channels, start=1):
            fan_in = c_in * spec.kernel_size ** 2
            extractor[f"conv{n}.weight"] = gen.standard_normal((c_out, c_in, spec.kernel_size, spec.kernel_size)) * math.sqrt(2.0 / fan_in)
            extractor[f"conv{n}.bias"] = np.zeros(c_out)
            c_in = c_out
        h, w = spec.stage_sizes()[-1]
        flat = c_in * h * w
    else:
        flat = spec.input_channels * spec.height * spec.width
        extractor["fc1.weight"] = gen.standard_normal((spec.hidden, flat)) * math.sqrt(2.0 / flat)
        extractor["fc1.bias"] = np.zeros(spec.hidden)
        flat = spec.hidden
    extractor["embed.weight"] = gen.standard_normal((spec.embedding_dim, flat)) * math.sqrt(1.0 / flat)
    extractor["embed.bias"] = np.zeros(spec.embedding_dim)
    classifier = _normalize_rows(gen.standard_normal((spec.num_classes, spec.embedding_dim)))
    return ModelParams(spec, extractor, classifier)


# --- extractor forward / backward ---

def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    k = w.shape[-1]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))  # (n, ho, wo, c_out)
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None], (xp.shape, windows)


def _conv_backward(dout: np.ndarray, w: np.ndarray, stride: int, cache):
    xp_shape, windows = cache
    k = w.shape[-1]
    pad = k // 2
    ho, wo = dout.shape[2], dout.shape[3]
    dw = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    dxp = np.zeros(xp_shape)
    for a in range(k):
        for c in range(k):
            dxp[:, :, a:a + stride * (ho - 1) + 1:stride, c:c + stride * (wo - 1) + 1:stride] += np.tensordot(
                dout, w[:, :, a, c], axes=([1], [0])
            ).transpose(0, 3, 1, 2)
    return dw, db, dxp[:, :, pad:xp_shape[2] - pad, pad:xp_shape[3] - pad]


def _extract(params: ModelParams, x: np.ndarray):
    """Forward pass to unit embeddings; returns (z, norms, cache)."""
    spec = params.spec
    caches = []
    a = x
    if spec.kind == "conv":
        for n in range(1, len(spec.conv_channels) + 1):
            pre, conv_cache = _conv_forward(a, params.extractor[f"conv{n}.weight"], params.extractor[f"conv{n}.bias"], spec.stride)
            caches.append((conv_cache, pre > 0))
            a = np.maximum(pre, 0.0)
        flat = a.reshape(a.shape[0], -1)
    else:
        h_in = x.reshape(x.shape[0], -1)
        pre = h_in @ params.extractor["fc1.weight"].T + params.extractor["fc1.bias"]
        caches.append((h_in, pre > 0))
        flat = np.maximum(pre, 0.0)
    e = flat @ params.extractor["embed.weight"].T + params.extractor["embed.bias"]
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericalAbort("embedding collapsed to the zero vector", {"quantity": "embedding norm"})
    return e / norms, norms, (caches, flat, a.shape)


def _extract_backward(params: ModelParams, z: np.ndarray, norms: np.ndarray, cache, dz: np.ndarray):
    spec = params.spec
    caches, flat, act_shape = cache
    grads: Dict[str, np.ndarray] = {}
    de = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / norms
    grads["embed.weight"] = de.T @ flat
    grads["embed.bias"] = de.sum(axis=0)
    dflat = de @ params.extractor["embed.weight"]
    if spec.kind == "conv":
        da = dflat.reshape(act_shape)
        for n in range(len(spec.conv_channels), 0, -1):
            conv_cache, active = caches[n - 1]
            dpre = da * active
            dw, db, da = _conv_backward(dpre, params.extractor[f"conv{n}.weight"], spec.stride, conv_cache)
            grads[f"conv{n}.weight"] = dw
            grads[f"conv{n}.bias"] = db
    else:
        h_in, active = caches[0]
        dpre = dflat * active
        grads["fc1.weight"] = dpre.T @ h_in
        grads["fc1.bias"] = dpre.sum(axis=0)
        da = (dpre @ params.extractor["fc1.weight"]).reshape((-1, spec.input_channels, spec.height, spec.width))
    return OrderedDict((name, grads[name]) for name in params.extractor), da


def _as_batch(params: ModelParams, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    spec = params.spec
    expected = (spec.input_channels, spec.height, spec.width)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ContractViolation(f"input shape {x.shape} does not match model input {expected}")
    return x, single


def embed(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Unit embeddings; (d,) for one image, (n, d) for a batch."""
    batch, single = _as_batch(params, x)
    z, _, _ = _extract(params, batch)
    return z[0] if single else z


# --- margin losses ---

def _margin_logits(cos: np.ndarray, y: np.ndarray, cfg: MarginConfig):
    """Scaled logits and d logit_target / d cos_target for each row."""
    rows = np.arange(cos.shape[0])
    target = cos[rows, y]
    if cfg.variant == "arcface" and cfg.margin > 0.0:
        clamped = np.clip(target, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
        angle = np.arccos(clamped)
        new_target = np.cos(angle + cfg.margin)
        slope = np.where(clamped == target, np.sin(angle + cfg.margin) / np.sin(angle), 0.0)
    elif cfg.variant == "cosface":
        new_target = target - cfg.margin
        slope = np.ones_like(target)
    else:
        new_target = target
        slope = np.ones_like(target)
    logits = cos.copy()
    logits[rows, y] = new_target
    return cfg.logit_scale * logits, slope


def _cross_entropy(logits: np.ndarray, y: np.ndarray):
    rows = np.arange(logits.shape[0])
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    losses = log_norm - shifted[rows, y]
    probs = np.exp(shifted - log_norm[:, None])
    probs[rows, y] -= 1.0
    return losses, probs


def _check_labels(y: np.ndarray, c: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if np.any(y < 0) or np.any(y >= c):
        raise ContractViolation(f"labels must lie in [0, {c}), got {y.min()}..{y.max()}")
    return y


def margin_losses(z: np.ndarray, y, params: ModelParams, cfg: MarginConfig) -> np.ndarray:
    """Per-sample margin cross-entropy for unit embeddings z of shape (n, d)."""
    z = np.atleast_2d(z)
    y = _check_labels(y, params.c)
    logits, _ = _margin_logits(z @ params.classifier.T, y, cfg)
    losses, _ = _cross_entropy(logits, y)
    return losses


def margin_loss(z: np.ndarray, y: int, params: ModelParams, cfg: MarginConfig) -> float:
    return float(margin_losses(np.asarray(z)[None], [y], params, cfg)[0])


@dataclass
class BackwardResult:
    loss: float
    grads: "OrderedDict[str, np.ndarray]"
    grad_input: np.ndarray
    losses: np.ndarray = field(repr=False, default=None)


def backward(params: ModelParams, x: np.ndarray, y, cfg: MarginConfig,
             reduction: Literal["mean", "sum"] = "mean") -> BackwardResult:
    """Loss plus exact gradients for every parameter array and every input pixel."""
    batch, single = _as_batch(params, x)
    y = _check_labels(y, params.c)
    if y.shape[0] != batch.shape[0]:
        raise ContractViolation(f"{batch.shape[0]} images but {y.shape[0]} labels")
    z, norms, cache = _extract(params, batch)
    cos = z @ params.classifier.T
    logits, slope = _margin_logits(cos, y, cfg)
    losses, dlogits = _cross_entropy(logits, y)
    weight = 1.0 / batch.shape[0] if reduction == "mean" else 1.0
    loss = float(losses.sum() * weight)
    if not math.isfinite(loss):
        raise NumericalAbort("non-finite loss", {"quantity": "margin loss"})
    dcos = dlogits * cfg.logit_scale * weight
    rows = np.arange(batch.shape[0])
    dcos[rows, y] *= slope
    grad_classifier = dcos.T @ z
    dz = dcos @ params.classifier
    grads, dx = _extract_backward(params, z, norms, cache, dz)
    grads["classifier.weight"] = grad_classifier
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalAbort("non-finite gradient", {"quantity": name})
    return BackwardResult(loss, grads, dx[0] if single else dx, losses)


class Recognizer:
    """Read-only handle on (params, margin) used by attacks and evaluation."""

    def __init__(self, params: ModelParams, margin: MarginConfig):
        self.params = params
        self.margin = margin

    def embed(self, x: np.ndarray) -> np.ndarray:
        return embed(self.params, x)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(self.embed(x)) @ self.params.classifier.T

    def loss(self, x: np.ndarray, y: int) -> float:
        return margin_loss(self.embed(x), y, self.params, self.margin)

    def loss_and_input_grad(self, x: np.ndarray, y: int) -> Tuple[float, np.ndarray]:
        result = backward(self.params, x, [y], self.margin, reduction="sum")
        return result.loss, result.grad_input


# --- optimisation ---

class SGD:
    """Momentum SGD; weight decay on extractor arrays, classifier rows renormalised."""

    def __init__(self, lr: float = 0.1, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: Dict[str, np.ndarray], lr: Optional[float] = None) -> ModelParams:
        return sgd_update(params, grads, self.lr if lr is None else lr, self.momentum,
                          self.weight_decay, velocity=self.velocity)


def sgd_update(params: ModelParams, grads: Dict[str, np.ndarray], lr: float = 0.1,
               momentum: float = 0.9, weight_decay: float = 1e-4,
               velocity: Optional[Dict[str, np.ndarray]] = None) -> ModelParams:
    """One momentum-SGD step; `velocity` is updated in place when given."""
    velocity = {} if velocity is None else velocity
    updated = {}
    for name, w in params.arrays().items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != w.shape:
            raise ContractViolation(f"gradient for {name} has shape {g.shape}, expected {w.shape}")
        if weight_decay and name in params.extractor:
            g = g + weight_decay * w
        if momentum:
            buf = velocity.get(name)
            buf = g.copy() if buf is None else momentum * buf + g
            velocity[name] = buf
            g = buf
        updated[name] = w - lr * g
    updated["classifier.weight"] = _normalize_rows(updated["classifier.weight"])
    return params.replace(updated)


# --- checkpoints ---

def save_checkpoint(params: ModelParams, path: Union[str, Path]) -> Path:
    """Flat binary (magic, array count, per-array dims, float64 LE data) plus a shapes sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = params.arrays()
    header = [CHECKPOINT_MAGIC, struct.pack("<I", len(arrays))]
    for w in arrays.values():
        header.append(struct.pack("<I", w.ndim) + struct.pack(f"<{w.ndim}I", *w.shape))
    with open(path, "wb") as f:
        f.write(b"".join(header))
        for w in arrays.values():
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
    sidecar = path.with_suffix(".shapes.txt")
    lines = [f"spec {params.spec.model_dump_json()}"]
    lines += [f"{name} {' '.join(str(s) for s in w.shape)}" for name, w in arrays.items()]
    sidecar.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    path = Path(path)
    sidecar = path.with_suffix(".shapes.txt")
    for p in (path, sidecar):
        if not p.exists():
            raise MissingFileError("checkpoint file missing", p)
    lines = sidecar.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("spec "):
        raise FileIntegrityError("checkpoint sidecar has no spec line", sidecar)
    spec = ModelSpec.model_validate_json(lines[0][len("spec "):])
    names = [ln.split()[0] for ln in lines[1:] if ln.strip()]
    blob = path.read_bytes()
    try:
        if blob[:8] != CHECKPOINT_MAGIC:
            raise FileIntegrityError("bad checkpoint magic", path)
        (count,) = struct.unpack_from("<I", blob, 8)
        if count != len(names):
            raise FileIntegrityError(f"checkpoint holds {count} arrays, sidecar lists {len(names)}", path)
        offset = 12
        shapes = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", blob, offset)
            shapes.append(struct.unpack_from(f"<{ndim}I", blob, offset + 4))
            offset += 4 + 4 * ndim
        arrays = {}
        for name, shape in zip(names, shapes):
            size = int(np.prod(shape))
            if offset + 8 * size > len(blob):
                raise FileIntegrityError(f"checkpoint truncated while reading {name}", path)
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape).astype(np.float64)
            offset += 8 * size
    except struct.error as e:
        raise FileIntegrityError(f"checkpoint header truncated ({e})", path) from e
    template = init_params(spec, 0)
    missing = set(template.arrays()) - set(arrays)
    if missing:
        raise FileIntegrityError(f"checkpoint lacks arrays {sorted(missing)}", path)
    return template.replace(arrays)
