"""Training loops: multi-dataset pre-training, fine-tuning, persistence.

Both stages share one loop: mixed single-dataset batches, masked BCE on
next-response predictions, Adam with optional global-norm clipping, and
early stopping on mean validation AUC. Fine-tuning may pass an
ImportanceProfile, in which case every backward pass is followed by
gradient modulation before the optimizer step; the forward pass is never
altered.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .autograd import NumericalError, Tape, bce_loss
from .data import DatasetSpec, GlobalVocab, mix_batches, pack_segments
from .importance import freeze_masks, modulate
from .metrics import auc as auc_metric
from .metrics import collect_predictions
from .model import KTModel, ModelConfig

logger = logging.getLogger(__name__)

GRID_LEARNING_RATES = (1e-3, 1e-4)
GRID_DROPOUTS = (0.1, 0.2)

CHECKPOINT_MAGIC = b"LRKT"
CHECKPOINT_VERSION = 1
_DIGEST_LEN = 32


class TrainingDivergedError(ArithmeticError):
    """Loss went non-finite; carries epoch, step and recent loss history."""

    def __init__(self, epoch, step, history):
        self.epoch = epoch
        self.step = step
        self.history = list(history)
        tail = ", ".join(f"{v:.4g}" for v in self.history[-8:])
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}; "
                         f"recent losses: [{tail}]")


class CheckpointFormatError(ValueError):
    """Not a checkpoint file (bad magic or malformed header)."""


class CheckpointVersionError(ValueError):
    def __init__(self, found, expected):
        super().__init__(f"checkpoint version {found}, this build reads {expected}")
        self.found = found
        self.expected = expected


class CheckpointTruncatedError(ValueError):
    """File ends before the declared payload and digest."""


class CheckpointDigestError(ValueError):
    """Stored SHA-256 digest does not match the file contents."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    dropout: float = 0.1
    max_epochs: int = 200
    patience: int = 10
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.max_epochs <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate, max_epochs and batch_size must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.learning_rate not in GRID_LEARNING_RATES:
            warnings.warn(f"learning_rate {self.learning_rate} outside the usual "
                          f"grid {GRID_LEARNING_RATES}", stacklevel=2)
        if self.dropout not in GRID_DROPOUTS:
            warnings.warn(f"dropout {self.dropout} outside the usual grid "
                          f"{GRID_DROPOUTS}", stacklevel=2)


def stage_seed(base_seed, *labels):
    """Stable per-stage seed from hashing the base seed with stage labels."""
    text = "|".join([str(int(base_seed)), *map(str, labels)])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little")


class Adam:
    """Standard Adam with bias correction.

    ``frozen`` masks mark elements whose update is skipped entirely,
    moment estimates included, so zero-importance rows stay bit-identical
    no matter how many steps run.
    """

    def __init__(self, params, config):
        self.params = params
        self.lr = config.learning_rate
        self.beta1, self.beta2, self.eps = config.beta1, config.beta2, config.eps
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = 0

    def step(self, grads, frozen=None):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            g = g.astype(p.data.dtype, copy=False)
            new_m = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            new_v = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            update = self.lr * (new_m / c1) / (np.sqrt(new_v / c2) + self.eps)
            if frozen is not None and name in frozen:
                hold = frozen[name]
                new_m = np.where(hold, self.m[name], new_m)
                new_v = np.where(hold, self.v[name], new_v)
                update = np.where(hold, 0.0, update)
            self.m[name] = new_m
            self.v[name] = new_v
            p.data -= update


def clip_gradients(grads, max_norm):
    """Scale all gradients if their joint L2 norm exceeds ``max_norm``."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {n: g * g.dtype.type(scale) for n, g in grads.items()}, norm


class EarlyStopper:
    """Best-value tracking with a patience window."""

    def __init__(self, patience):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = -1

    def update(self, value, epoch):
        """Returns (improved, should_stop)."""
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            return True, False
        return False, (epoch - self.best_epoch) >= self.patience


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: GlobalVocab
    dataset_specs: list
    params: OrderedDict
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, dataset_specs, metadata):
        params = OrderedDict((n, t.data.astype("<f4"))
                             for n, t in model.parameters().items())
        return cls(model.config, model.vocab, list(dataset_specs), params, dict(metadata))

    def build_model(self, dtype=np.float32):
        return KTModel.from_arrays(self.config, self.vocab, self.params, dtype=dtype)


def save_checkpoint(ckpt, path):
    """Binary layout: magic, u32 version, u64 header length, JSON header,
    raw little-endian float32 payload, SHA-256 digest of header+payload."""
    manifest = []
    offset = 0
    chunks = []
    for name, arr in ckpt.params.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    header_obj = {
        "config": ckpt.config.to_json(),
        "vocab": ckpt.vocab.to_json(),
        "dataset_specs": [{"name": s.name, "dataset_index": s.dataset_index,
                           "path": s.path} for s in ckpt.dataset_specs],
        "metadata": ckpt.metadata,
        "manifest": manifest,
    }
    header = json.dumps(header_obj, sort_keys=True).encode("utf-8")
    payload = b"".join(chunks)
    digest = hashlib.sha256(header + payload).digest()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)
        fh.write(digest)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise CheckpointTruncatedError(f"{path}: {len(blob)} bytes is too short for a header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}, "
                                    f"expected {CHECKPOINT_MAGIC!r}")
    if len(blob) < 16:
        raise CheckpointTruncatedError(f"{path}: header fields cut short")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(version, CHECKPOINT_VERSION)
    (header_len,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + header_len:
        raise CheckpointTruncatedError(f"{path}: header declared {header_len} bytes, "
                                       f"file ends early")
    header = blob[16:16 + header_len]
    try:
        obj = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from None

    manifest = obj["manifest"]
    payload_len = sum(4 * int(np.prod(m["shape"])) for m in manifest)
    expected = 16 + header_len + payload_len + _DIGEST_LEN
    if len(blob) < expected:
        raise CheckpointTruncatedError(f"{path}: need {expected} bytes, found {len(blob)}")
    if len(blob) > expected:
        raise CheckpointFormatError(f"{path}: {len(blob) - expected} bytes of trailing junk")
    payload = blob[16 + header_len:16 + header_len + payload_len]
    digest = blob[expected - _DIGEST_LEN:]
    if hashlib.sha256(header + payload).digest() != digest:
        raise CheckpointDigestError(f"{path}: SHA-256 digest mismatch")

    params = OrderedDict()
    for m in manifest:
        size = 4 * int(np.prod(m["shape"]))
        raw = payload[m["offset"]:m["offset"] + size]
        params[m["name"]] = np.frombuffer(raw, dtype="<f4").reshape(m["shape"]).copy()
    return Checkpoint(
        config=ModelConfig.from_json(obj["config"]),
        vocab=GlobalVocab.from_json(obj["vocab"]),
        dataset_specs=[DatasetSpec(d["name"], d["dataset_index"], d["path"])
                       for d in obj["dataset_specs"]],
        params=params,
        metadata=obj["metadata"])


# ---------------------------------------------------------------------------
# the loop


def _validation_auc(model, datasets, batch_size):
    scores = []
    for prepared in datasets:
        probs, labels = collect_predictions(
            model, prepared.splits.valid, prepared.spec.dataset_index, batch_size)
        scores.append(auc_metric(probs, labels))
    return float(np.mean(scores)), scores


def fit(model, datasets, config, profile=None, stage="train"):
    """Shared optimization loop; returns the best-validation checkpoint."""
    for prepared in datasets:
        if not prepared.splits.train or not prepared.splits.valid:
            raise ValueError(f"dataset {prepared.spec.name!r} needs non-empty "
                             "train and valid splits")
    masks = None
    gated = None
    if profile is not None:
        profile.check_covers(model.config.n_layers)
        gated = model.gated_layers()
        shapes = {n: t.shape for n, t in model.parameters().items()}
        masks = freeze_masks(profile, gated, shapes) or None

    adam = Adam(model.parameters(), config)
    drop_rng = np.random.default_rng([config.seed, 0xD0])
    stopper = EarlyStopper(config.patience)
    best_params = model.copy_arrays()
    history = []
    val_history = []
    step = 0
    train_lists = [d.splits.train for d in datasets]
    for epoch in range(config.max_epochs):
        for d_pos, segs in mix_batches(train_lists, config.batch_size,
                                       seed=[config.seed, 0xBA, epoch]):
            batch = pack_segments(segs, model.vocab,
                                  datasets[d_pos].spec.dataset_index, model.dtype)
            model.zero_grad()
            try:
                with Tape() as tape:
                    probs = model.forward_batch(batch, train=True, rng=drop_rng,
                                                drop_p=config.dropout)
                    loss = bce_loss(probs, batch.targets, batch.pred_mask)
            except NumericalError as exc:
                raise TrainingDivergedError(epoch, step, history) from exc
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(epoch, step, history)
            tape.backward(loss)
            grads = {n: t.grad for n, t in model.parameters().items()
                     if t.grad is not None}
            if profile is not None:
                grads = modulate(grads, profile, gated)
            if config.clip_norm:
                grads, _ = clip_gradients(grads, config.clip_norm)
            adam.step(grads, frozen=masks)
            history.append(loss_val)
            step += 1
        val_auc, per_dataset = _validation_auc(model, datasets, config.batch_size)
        val_history.append(val_auc)
        improved, should_stop = stopper.update(val_auc, epoch)
        if improved:
            best_params = model.copy_arrays()
        logger.info("%s epoch %d: train loss %.4f, val AUC %.4f%s",
                    stage, epoch, history[-1], val_auc, " *" if improved else "")
        if should_stop:
            break

    for name, arr in best_params.items():
        model.param(name).data[...] = arr
    metadata = {
        "stage": stage,
        "seed": config.seed,
        "epochs_run": len(val_history),
        "best_epoch": stopper.best_epoch,
        "best_val_auc": stopper.best,
        "val_auc_history": val_history,
        "final_train_loss": history[-1] if history else None,
    }
    return Checkpoint.from_model(model, [d.spec for d in datasets], metadata)


def pretrain(model, datasets, config):
    """Joint pre-training over one or more rich datasets."""
    return fit(model, datasets, config, profile=None, stage="pretrain")


def finetune(checkpoint, dataset, config, profile=None, dtype=np.float32):
    """Continue training a checkpoint on one dataset.

    The checkpoint's vocabulary must already cover the dataset (use
    ``zero_shot_adapt`` on an unseen one before saving/passing it here).
    When ``profile`` is given, gradients are importance-modulated after
    every backward pass.
    """
    model = checkpoint.build_model(dtype=dtype)
    entries = {(name, idx) for name, idx, _, _ in model.vocab.entries}
    key = (dataset.spec.name, dataset.spec.dataset_index)
    if key not in entries:
        raise ValueError(f"dataset {key} not in the checkpoint vocabulary; "
                         "adapt the model first")
    return fit(model, [dataset], config, profile=profile, stage="finetune")
