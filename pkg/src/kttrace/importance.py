"""Per-layer unit importance from virtual gate gradients.

An all-ones gate is multiplied into each sublayer's output; the average
absolute gradient of the training loss with respect to the gate, taken
over the target dataset, scores how much each output unit matters there.
During fine-tuning the score vector is broadcast over each associated
parameter and multiplied into its gradient, so unimportant units barely
move while important ones learn freely.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tape, bce_loss
from .data import pack_segments
from .model import SUBLAYER_KINDS


@dataclass
class LayerImportance:
    block: int
    kind: str
    values: np.ndarray
    normalized: bool = False

    @property
    def layer_id(self):
        return (self.block, self.kind)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if (self.values < 0).any():
            raise ValueError("importance values must be non-negative")
        if self.kind not in SUBLAYER_KINDS:
            raise ValueError(f"unknown sublayer kind {self.kind!r}")


@dataclass
class ImportanceProfile:
    """One importance vector per gated sublayer of every block."""

    dataset: str
    n_samples: int
    layers: dict = field(default_factory=dict)

    def add(self, imp):
        self.layers[imp.layer_id] = imp

    def check_covers(self, n_layers):
        expected = {(i, kind) for i in range(n_layers) for kind in SUBLAYER_KINDS}
        missing = expected - set(self.layers)
        if missing:
            raise ValueError(f"profile is missing gated layers: {sorted(missing)}")
        extra = set(self.layers) - expected
        if extra:
            raise ValueError(f"profile has unknown layers: {sorted(extra)}")

    def to_json(self):
        return {
            "dataset": self.dataset,
            "n_samples": self.n_samples,
            "layers": [
                {"block": imp.block, "kind": imp.kind,
                 "values": [float(v) for v in imp.values]}
                for imp in (self.layers[k] for k in sorted(self.layers))
            ],
        }

    @classmethod
    def from_json(cls, obj):
        profile = cls(dataset=obj["dataset"], n_samples=obj["n_samples"])
        for entry in obj["layers"]:
            values = np.asarray(entry["values"], dtype=np.float32)
            vmax = values.max() if values.size else 0.0
            profile.add(LayerImportance(entry["block"], entry["kind"], values,
                                        normalized=(vmax == 1.0 or vmax == 0.0)))
        return profile

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def constant_profile(model, value, dataset="synthetic"):
    """All-``value`` profile covering every gated sublayer (testing aid)."""
    profile = ImportanceProfile(dataset=dataset, n_samples=0)
    for (block, kind), width in model.gate_widths().items():
        profile.add(LayerImportance(block, kind,
                                    np.full(width, value, dtype=np.float32),
                                    normalized=True))
    return profile


def compute_importance(model, prepared, batch_size=1, normalize=True):
    """Average absolute gate gradients over a prepared dataset's train split.

    The model runs in eval mode with all-ones gates attached; per batch the
    masked BCE loss is backpropagated and |d loss / d gate| accumulated.
    The accumulated sum is divided by the number of training sequences
    (each batch of one sequence contributes exactly one per-sample term;
    larger batches trade fidelity for speed). Parameters and gates are
    never updated. With ``normalize``, each layer is divided by its own
    max so the strongest unit scores 1.
    """
    segments = prepared.splits.train
    if not segments:
        raise ValueError(f"dataset {prepared.spec.name!r} has no training sequences")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    gates = model.make_gates()
    for gate in gates.values():
        gate.reset_grad()
    acc = {lid: np.zeros(g.width, dtype=model.dtype) for lid, g in gates.items()}
    n = len(segments)
    for start in range(0, n, batch_size):
        chunk = segments[start:start + batch_size]
        batch = pack_segments(chunk, model.vocab, prepared.spec.dataset_index,
                              dtype=model.dtype)
        with Tape() as tape:
            probs = model.forward_batch(batch, gates=gates, train=False, drop_p=0.0)
            loss = bce_loss(probs, batch.targets, batch.pred_mask)
        tape.backward(loss)
        for lid, gate in gates.items():
            acc[lid] += np.abs(gate.captured_grad)
            gate.reset_grad()

    profile = ImportanceProfile(dataset=prepared.spec.name, n_samples=n)
    for (block, kind), total in acc.items():
        values = total / n
        if normalize:
            vmax = values.max()
            if vmax > 0:
                values = values / vmax
        profile.add(LayerImportance(block, kind, values, normalized=normalize))
    profile.check_covers(model.config.n_layers)
    if all(imp.values.max() == 0 for imp in profile.layers.values()):
        warnings.warn(f"all importance values are zero for {prepared.spec.name!r}; "
                      "the model output is insensitive to every gated unit",
                      RuntimeWarning)
    return profile


def expand_importance(values, shape):
    """Copy a per-unit vector out to a parameter's gradient shape.

    Weight matrices are stored [out, in]; row i takes values[i]. Biases
    take the vector itself.
    """
    values = np.asarray(values)
    if values.ndim != 1:
        raise ValueError(f"importance values must be a vector, got shape {values.shape}")
    if len(shape) not in (1, 2) or shape[0] != values.shape[0]:
        raise ValueError(f"cannot expand importance of width {values.shape[0]} "
                         f"to parameter shape {tuple(shape)}")
    if len(shape) == 1:
        return values.copy()
    return np.broadcast_to(values[:, None], shape).copy()


def modulate(gradients, profile, gated_layers):
    """Rescale gated-sublayer gradients by broadcast importance.

    ``gated_layers`` maps (block, kind) -> parameter names, as produced by
    ``KTModel.gated_layers``. Gradients of parameters outside the gated
    sublayers (embeddings, layer norms, prediction head) pass through
    untouched; only the backward side changes, never the forward pass.
    """
    out = dict(gradients)
    for layer_id, names in gated_layers.items():
        if layer_id not in profile.layers:
            raise ValueError(f"profile for {profile.dataset!r} is missing gated "
                             f"layer {layer_id}")
        values = profile.layers[layer_id].values
        for name in names:
            grad = gradients[name]
            out[name] = grad * expand_importance(values.astype(grad.dtype), grad.shape)
    return out


def freeze_masks(profile, gated_layers, shapes):
    """Boolean per-element masks marking zero-importance rows.

    Used by the optimizer to skip the update entirely where the expanded
    mask row is zero, so zero-importance units stay bit-identical.
    """
    masks = {}
    for layer_id, names in gated_layers.items():
        values = profile.layers[layer_id].values
        if not (values == 0).any():
            continue
        for name in names:
            masks[name] = expand_importance(values, shapes[name]) == 0
    return masks
