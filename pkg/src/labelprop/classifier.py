"""Small one-hidden-layer classifier trained on labels plus weighted pseudo-labels.

The network is input -> ReLU hidden layer -> class logits. Its hidden
activations double as re-embeddings for graph rebuilding, so the
propagate/train/re-embed loop can iterate. Checkpoints use a little-endian
binary format: magic ``LPMC``, u32 version = 1, u64 d/h/c, then W1, b1,
W2, b2 as f32 arrays in that order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import DatasetManifest, EmbeddingMatrix, ROLE_LABELED
from .errors import DataError, FormatError, ParamError, TrainError
from .propagation import PropagationResult, UNASSIGNED

CHECKPOINT_MAGIC = b"LPMC"
CHECKPOINT_VERSION = 1

DEFAULT_HIDDEN = 64


@dataclass
class ClassifierParams:
    """Weights and biases; shapes (d,h), (h,), (h,c), (c,)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name in ("W1", "b1", "W2", "b2"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.isfinite(arr).all():
                raise DataError(f"non-finite value in parameter {name}")
            setattr(self, name, arr)
        d, h = self.W1.shape
        if self.b1.shape != (h,) or self.W2.shape[0] != h:
            raise ParamError("inconsistent hidden width across parameters")
        if self.b2.shape != (self.W2.shape[1],):
            raise ParamError("inconsistent class count across parameters")
        del d

    @property
    def d(self) -> int:
        return self.W1.shape[0]

    @property
    def h(self) -> int:
        return self.W1.shape[1]

    @property
    def c(self) -> int:
        return self.W2.shape[1]

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 50
    batch_size: int = 128
    pseudo_weight: float = 1.0
    seed: int = 0
    optimizer: str = "sgd"   # "sgd" | "adam"
    uniform_pseudo_weights: bool = False

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ParamError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ParamError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParamError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.pseudo_weight < 0:
            raise ParamError(f"pseudo_weight must be nonnegative, got {self.pseudo_weight}")
        if self.optimizer not in ("sgd", "adam"):
            raise ParamError(f"unknown optimizer {self.optimizer!r}")


def init_params(d: int, h: int, c: int, seed: int) -> ClassifierParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases (PCG64)."""
    if min(d, h, c) < 1:
        raise ParamError(f"invalid sizes d={d}, h={h}, c={c}")
    rng = np.random.default_rng(seed)
    lim1 = 1.0 / math.sqrt(d)
    lim2 = 1.0 / math.sqrt(h)
    return ClassifierParams(
        W1=rng.uniform(-lim1, lim1, size=(d, h)),
        b1=np.zeros(h),
        W2=rng.uniform(-lim2, lim2, size=(h, c)),
        b2=np.zeros(c),
    )


def forward(params: ClassifierParams, emb: EmbeddingMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Hidden ReLU activations and class logits for every item."""
    x = emb.data.astype(np.float64)
    if x.shape[1] != params.d:
        raise ParamError(f"embedding dim {x.shape[1]} does not match parameters (d={params.d})")
    hidden = np.maximum(x @ params.W1 + params.b1, 0.0)
    scores = hidden @ params.W2 + params.b2
    return hidden, scores


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(
    params: ClassifierParams,
    emb: EmbeddingMatrix,
    targets: np.ndarray,
    weights: np.ndarray,
) -> tuple[float, ClassifierParams]:
    """Weighted-mean cross-entropy and its exact gradient.

    loss = sum_i w_i * CE(softmax(scores_i), targets_i) / sum_i w_i.
    Targets are class indices; every target must be valid even for
    zero-weight items. A zero weight sum has no defined loss.
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    x = emb.data.astype(np.float64)
    n = x.shape[0]
    if targets.shape != (n,) or weights.shape != (n,):
        raise ParamError("targets and weights must be 1-D with one entry per item")
    if ((targets < 0) | (targets >= params.c)).any():
        raise ParamError("target class index out of range")
    weight_sum = float(weights.sum())
    if weight_sum <= 0:
        raise ParamError("sum of example weights must be positive")

    hidden, scores = forward(params, emb)
    logp = _log_softmax(scores)
    ce = -logp[np.arange(n), targets]
    loss = float((weights * ce).sum() / weight_sum)

    dscores = np.exp(logp)
    dscores[np.arange(n), targets] -= 1.0
    dscores *= (weights / weight_sum)[:, None]
    grad_w2 = hidden.T @ dscores
    grad_b2 = dscores.sum(axis=0)
    dhidden = dscores @ params.W2.T
    dhidden[hidden <= 0] = 0.0
    grad_w1 = x.T @ dhidden
    grad_b1 = dhidden.sum(axis=0)
    return loss, ClassifierParams(W1=grad_w1, b1=grad_b1, W2=grad_w2, b2=grad_b2)


def training_targets(
    manifest: DatasetManifest,
    propagation: PropagationResult,
    cfg: TrainConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-item (target, weight) pairs for the combined training objective.

    Labeled items keep their true class at weight 1. Everything else takes
    its pseudo-label at weight pseudo_weight * confidence (or a flat
    pseudo_weight when uniform weighting is requested); UNASSIGNED items
    get weight 0 and a placeholder class of 0.
    """
    truth = manifest.labels()
    labeled = manifest.roles() == ROLE_LABELED
    targets = np.where(labeled, truth, propagation.pseudo_labels)
    if cfg.uniform_pseudo_weights:
        pseudo_w = np.full(manifest.n, cfg.pseudo_weight)
    else:
        pseudo_w = cfg.pseudo_weight * propagation.confidence
    weights = np.where(labeled, 1.0, pseudo_w)
    weights = np.where(targets == UNASSIGNED, 0.0, weights)
    targets = np.where(targets == UNASSIGNED, 0, targets)
    return targets.astype(np.int64), weights.astype(np.float64)


def train(
    params: ClassifierParams,
    emb: EmbeddingMatrix,
    manifest: DatasetManifest,
    propagation: PropagationResult,
    cfg: TrainConfig,
) -> tuple[ClassifierParams, list[float]]:
    """Mini-batch training; returns updated parameters and per-epoch mean loss.

    Shuffling is driven entirely by cfg.seed, so a fixed (seed, config)
    pair reproduces the final parameters exactly. The input `params` object
    is not modified.
    """
    cfg.validate()
    targets, weights = training_targets(manifest, propagation, cfg)
    active = np.flatnonzero(weights > 0)
    if active.size == 0:
        raise ParamError("no items with positive training weight")

    params = params.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = _AdamState(params) if cfg.optimizer == "adam" else None
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        order = active[rng.permutation(active.size)]
        ce_sum = 0.0
        w_sum = 0.0
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            sub = EmbeddingMatrix(data=emb.data[batch])
            batch_w = weights[batch]
            loss, grads = loss_and_grad(params, sub, targets[batch], batch_w)
            bw = float(batch_w.sum())
            ce_sum += loss * bw
            w_sum += bw
            if opt is None:
                params.W1 -= cfg.learning_rate * grads.W1
                params.b1 -= cfg.learning_rate * grads.b1
                params.W2 -= cfg.learning_rate * grads.W2
                params.b2 -= cfg.learning_rate * grads.b2
            else:
                opt.step(params, grads, cfg.learning_rate)
        epoch_loss = ce_sum / w_sum
        if not math.isfinite(epoch_loss):
            raise TrainError(f"training diverged at epoch {epoch}")
        trace.append(epoch_loss)
    return params, trace


class _AdamState:
    """Adam moments over the four parameter arrays (beta1=0.9, beta2=0.999)."""

    def __init__(self, params: ClassifierParams, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(getattr(params, k)) for k in ("W1", "b1", "W2", "b2")}
        self.v = {k: np.zeros_like(getattr(params, k)) for k in ("W1", "b1", "W2", "b2")}

    def step(self, params: ClassifierParams, grads: ClassifierParams, lr: float) -> None:
        self.t += 1
        correct1 = 1.0 - self.beta1**self.t
        correct2 = 1.0 - self.beta2**self.t
        for key in ("W1", "b1", "W2", "b2"):
            g = getattr(grads, key)
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * g * g
            m_hat = self.m[key] / correct1
            v_hat = self.v[key] / correct2
            getattr(params, key)[...] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def reembed(params: ClassifierParams, emb: EmbeddingMatrix) -> EmbeddingMatrix:
    """Unit-normalized hidden activations, for rebuilding the graph.

    Rows where every hidden unit is ReLU-dead cannot be normalized; those
    rows are reported in a DataError.
    """
    hidden, _ = forward(params, emb)
    norms = np.linalg.norm(hidden, axis=1)
    dead = np.flatnonzero(norms == 0)
    if dead.size:
        shown = ", ".join(str(i) for i in dead[:10])
        more = f" (+{dead.size - 10} more)" if dead.size > 10 else ""
        raise DataError(f"all-zero hidden activations for rows {shown}{more}")
    return EmbeddingMatrix(data=(hidden / norms[:, None]).astype(np.float32))


def save_checkpoint(params: ClassifierParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(
            struct.pack(
                "<4sIQQQ", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.d, params.h, params.c
            )
        )
        for key in ("W1", "b1", "W2", "b2"):
            fh.write(np.ascontiguousarray(getattr(params, key), dtype="<f4").tobytes())


def load_checkpoint(path) -> ClassifierParams:
    with open(path, "rb") as fh:
        header = fh.read(32)
        if len(header) < 32:
            raise FormatError(f"{path}: truncated header")
        magic, version, d, h, c = struct.unpack("<4sIQQQ", header)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        payload = fh.read()
    counts = (d * h, h, h * c, c)
    expected = 4 * sum(counts)
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arrays = []
    off = 0
    for count, shape in zip(counts, ((d, h), (h,), (h, c), (c,))):
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        arrays.append(arr.astype(np.float64).reshape(shape))
        off += count * 4
    return ClassifierParams(*arrays)


def pretrain_config(cfg: TrainConfig) -> TrainConfig:
    """The same settings with the pseudo-label term switched off."""
    return replace(cfg, pseudo_weight=0.0)
