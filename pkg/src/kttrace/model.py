"""Decoder-only knowledge-tracing model.

Each interaction step is encoded as a sum of six embedding families
(question, KC-set mean, response, data type, dataset, position) and fed
through a pre-layer-norm stack of causal transformer decoder blocks. The
hidden state at step j, summed with the embedding of the upcoming
question, drives a two-layer head that predicts the probability of a
correct response at step j+1.

Every block exposes three gate attachment points (attention output,
feed-forward expansion, feed-forward projection) for importance probing.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .autograd import GateParam, Tensor
from .data import pack_segments

INIT_STD = 0.02

# name -> (n_layers, d_model, n_head, d_ff)
PRESETS = {
    "base-89M": (4, 256, 8, 256),
    "base-221M": (24, 512, 16, 1024),
    "base-478M": (24, 1024, 16, 1024),
    "base-1.01B": (32, 1536, 24, 2560),
}

SUBLAYER_KINDS = ("attention", "intermediate", "output")


@dataclass
class ModelConfig:
    n_layers: int
    d_model: int
    n_head: int
    d_ff: int
    dropout: float = 0.1
    max_seq_len: int = 200
    n_questions: int = 0
    n_kcs: int = 0
    n_datasets: int = 0

    def validate(self):
        if self.d_model % self.n_head != 0:
            raise ValueError(
                f"d_model {self.d_model} must be divisible by n_head {self.n_head}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def from_preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        n_layers, d_model, n_head, d_ff = PRESETS[name]
        return cls(n_layers=n_layers, d_model=d_model, n_head=n_head, d_ff=d_ff,
                   **overrides)

    def sized_for(self, vocab):
        return replace(self, n_questions=vocab.total_questions,
                       n_kcs=vocab.total_kcs, n_datasets=vocab.n_datasets)

    def to_json(self):
        return {k: getattr(self, k) for k in (
            "n_layers", "d_model", "n_head", "d_ff", "dropout", "max_seq_len",
            "n_questions", "n_kcs", "n_datasets")}

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


def _parameter_specs(config, vocab):
    """Declared (name, shape, kind) list; the flat order is the checkpoint order."""
    d, f = config.d_model, config.d_ff
    specs = [
        ("emb.question", (vocab.n_question_rows, d), "weight"),
        ("emb.kc", (vocab.n_kc_rows, d), "weight"),
        ("emb.response", (2, d), "weight"),
        ("emb.type", (2, d), "weight"),
        ("emb.dataset", (vocab.n_datasets, d), "weight"),
        ("emb.position", (config.max_seq_len, d), "weight"),
    ]
    for i in range(config.n_layers):
        specs += [
            (f"block{i}.ln1.gain", (d,), "gain"),
            (f"block{i}.ln1.bias", (d,), "bias"),
            (f"block{i}.attn.wq", (d, d), "weight"),
            (f"block{i}.attn.bq", (d,), "bias"),
            (f"block{i}.attn.wk", (d, d), "weight"),
            (f"block{i}.attn.bk", (d,), "bias"),
            (f"block{i}.attn.wv", (d, d), "weight"),
            (f"block{i}.attn.bv", (d,), "bias"),
            (f"block{i}.attn.wo", (d, d), "weight"),
            (f"block{i}.attn.bo", (d,), "bias"),
            (f"block{i}.ln2.gain", (d,), "gain"),
            (f"block{i}.ln2.bias", (d,), "bias"),
            (f"block{i}.inter.w", (f, d), "weight"),
            (f"block{i}.inter.b", (f,), "bias"),
            (f"block{i}.output.w", (d, f), "weight"),
            (f"block{i}.output.b", (d,), "bias"),
        ]
    specs += [
        ("final_ln.gain", (d,), "gain"),
        ("final_ln.bias", (d,), "bias"),
        ("head.w1", (f, d), "weight"),
        ("head.b1", (f,), "bias"),
        ("head.w2", (1, f), "weight"),
        ("head.b2", (1,), "bias"),
    ]
    return specs


def parameter_count(config, vocab):
    """Trainable parameter total from the declared shapes, no allocation."""
    return sum(int(np.prod(shape)) for _, shape, _ in _parameter_specs(config, vocab))


class KTModel:
    """A built model: config, vocabulary, and named parameter tensors."""

    def __init__(self, config, vocab, params):
        config.validate()
        self.config = config
        self.vocab = vocab
        self._params = params
        self.dtype = next(iter(params.values())).dtype

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, config, vocab, seed, dtype=np.float32):
        """Initialize all weights from N(0, 0.02); biases zero, norm gains one."""
        config = config.sized_for(vocab) if config.n_questions == 0 else config
        if (config.n_questions, config.n_kcs, config.n_datasets) != (
                vocab.total_questions, vocab.total_kcs, vocab.n_datasets):
            raise ValueError(
                f"config sizes ({config.n_questions}, {config.n_kcs}, {config.n_datasets}) "
                f"do not match vocab ({vocab.total_questions}, {vocab.total_kcs}, "
                f"{vocab.n_datasets})")
        rng = np.random.default_rng(seed)
        params = OrderedDict()
        for name, shape, kind in _parameter_specs(config, vocab):
            if kind == "weight":
                arr = rng.normal(0.0, INIT_STD, shape).astype(dtype)
            elif kind == "gain":
                arr = np.ones(shape, dtype=dtype)
            else:
                arr = np.zeros(shape, dtype=dtype)
            params[name] = Tensor(arr, requires_grad=True, name=name)
        return cls(config, vocab, params)

    @classmethod
    def from_arrays(cls, config, vocab, arrays, dtype=np.float32):
        params = OrderedDict()
        for name, shape, _ in _parameter_specs(config, vocab):
            arr = np.asarray(arrays[name], dtype=dtype)
            if arr.shape != shape:
                raise ValueError(f"parameter {name}: expected shape {shape}, got {arr.shape}")
            params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
        return cls(config, vocab, params)

    # -- introspection ------------------------------------------------------

    def parameters(self):
        return self._params

    def param(self, name):
        return self._params[name]

    @property
    def n_params(self):
        return sum(int(np.prod(t.shape)) for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def copy_arrays(self):
        return OrderedDict((n, t.data.copy()) for n, t in self._params.items())

    def gated_layers(self):
        """Map (block, sublayer kind) -> names of that sublayer's parameters."""
        out = OrderedDict()
        for i in range(self.config.n_layers):
            out[(i, "attention")] = [f"block{i}.attn.{p}" for p in
                                     ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
            out[(i, "intermediate")] = [f"block{i}.inter.w", f"block{i}.inter.b"]
            out[(i, "output")] = [f"block{i}.output.w", f"block{i}.output.b"]
        return out

    def gate_widths(self):
        d, f = self.config.d_model, self.config.d_ff
        out = OrderedDict()
        for i in range(self.config.n_layers):
            out[(i, "attention")] = d
            out[(i, "intermediate")] = f
            out[(i, "output")] = d
        return out

    def make_gates(self):
        return OrderedDict(
            (lid, GateParam(w, dtype=self.dtype, name=f"gate.{lid[0]}.{lid[1]}"))
            for lid, w in self.gate_widths().items())

    # -- forward ------------------------------------------------------------

    def _kc_mean(self, kc_ids, kc_mask, kc_scale):
        e = ag.embedding_lookup(self._params["emb.kc"], kc_ids)
        e = ag.mul(e, Tensor(kc_mask[..., None]))
        e = ag.mean_over_axis(e, 2)
        return ag.mul(e, Tensor(kc_scale))

    def encode_steps(self, batch):
        """Sum the six embedding families into [B, T, d_model] step vectors."""
        T = batch.questions.shape[1]
        if T > self.config.max_seq_len:
            raise ValueError(
                f"sequence length {T} exceeds max_seq_len {self.config.max_seq_len}")
        P = self._params
        type_q = ag.embedding_lookup(P["emb.type"], np.array([[0]]))
        type_c = ag.embedding_lookup(P["emb.type"], np.array([[1]]))
        enc = ag.embedding_lookup(P["emb.question"], batch.questions)
        enc = ag.add(enc, type_q)
        enc = ag.add(enc, self._kc_mean(batch.kcs, batch.kc_mask, batch.kc_scale))
        enc = ag.add(enc, type_c)
        enc = ag.add(enc, ag.embedding_lookup(P["emb.response"], batch.responses))
        enc = ag.add(enc, ag.embedding_lookup(
            P["emb.dataset"], np.array([[batch.dataset_index]])))
        enc = ag.add(enc, ag.embedding_lookup(
            P["emb.position"], np.arange(T)[None, :]))
        return enc

    def encode_interactions(self, sequences, dataset_index):
        """Spec'd convenience: pack then encode a batch of sequences."""
        batch = pack_segments(sequences, self.vocab, dataset_index, dtype=self.dtype)
        return self.encode_steps(batch)

    def encode_queries(self, batch):
        """Next-question conditioning: question + KC + data type, no response."""
        P = self._params
        type_q = ag.embedding_lookup(P["emb.type"], np.array([[0]]))
        type_c = ag.embedding_lookup(P["emb.type"], np.array([[1]]))
        q = ag.embedding_lookup(P["emb.question"], batch.next_questions)
        q = ag.add(q, type_q)
        q = ag.add(q, self._kc_mean(batch.next_kcs, batch.next_kc_mask,
                                    batch.next_kc_scale))
        return ag.add(q, type_c)

    def _linear(self, x, w, b):
        return ag.add(ag.matmul(x, self._params[w], transpose_b=True), self._params[b])

    def forward_batch(self, batch, gates=None, train=False, rng=None, drop_p=None):
        """Predicted next-response probabilities, shape [B, T, 1].

        Position t carries the prediction for interaction t+1;
        ``batch.pred_mask`` marks which of those are real. ``gates``, when
        given, multiplies each sublayer output by its all-ones gate so the
        tape captures per-unit gradients.
        """
        p_drop = self.config.dropout if drop_p is None else drop_p
        if train and p_drop > 0.0 and rng is None:
            raise ValueError("training forward with dropout needs a seeded rng")
        P = self._params
        h = self.encode_steps(batch)
        query = self.encode_queries(batch)
        for i in range(self.config.n_layers):
            z = ag.layer_norm(h, P[f"block{i}.ln1.gain"], P[f"block{i}.ln1.bias"])
            q = self._linear(z, f"block{i}.attn.wq", f"block{i}.attn.bq")
            k = self._linear(z, f"block{i}.attn.wk", f"block{i}.attn.bk")
            v = self._linear(z, f"block{i}.attn.wv", f"block{i}.attn.bv")
            a = ag.causal_attention(q, k, v, self.config.n_head)
            a = self._linear(a, f"block{i}.attn.wo", f"block{i}.attn.bo")
            if gates is not None:
                a = ag.gate_apply(a, gates[(i, "attention")])
            a = ag.dropout(a, p_drop, rng, train)
            h = ag.add(h, a)

            z2 = ag.layer_norm(h, P[f"block{i}.ln2.gain"], P[f"block{i}.ln2.bias"])
            inter = ag.sigmoid(self._linear(z2, f"block{i}.inter.w", f"block{i}.inter.b"))
            if gates is not None:
                inter = ag.gate_apply(inter, gates[(i, "intermediate")])
            out = ag.matmul(inter, P[f"block{i}.output.w"], transpose_b=True)
            out = ag.add(out, P[f"block{i}.output.b"])
            if gates is not None:
                out = ag.gate_apply(out, gates[(i, "output")])
            out = ag.dropout(out, p_drop, rng, train)
            h = ag.add(h, out)

        h = ag.layer_norm(h, P["final_ln.gain"], P["final_ln.bias"])
        s = ag.add(h, query)
        hid = ag.sigmoid(self._linear(s, "head.w1", "head.b1"))
        logit = self._linear(hid, "head.w2", "head.b2")
        return ag.sigmoid(logit)

    def predict_batch(self, batch):
        """Eval-mode forward outside any tape; returns a plain [B, T] array."""
        probs = self.forward_batch(batch, train=False, drop_p=0.0)
        return probs.data[..., 0]


def zero_shot_adapt(model, name, n_questions, n_kcs, seed, noise_std=0.01):
    """Extend a pre-trained model's vocabularies to an unseen dataset.

    New question/KC rows start at the mean of the trained real rows plus
    N(0, noise_std); the new dataset embedding starts at the mean of the
    trained dataset embeddings. Decoder weights are untouched, so the
    adapted model is usable for zero-shot evaluation immediately.
    """
    old_vocab = model.vocab
    new_vocab = old_vocab.extended(name, n_questions, n_kcs)
    rng = np.random.default_rng(seed)
    dtype = model.dtype

    def grow_table(table, n_real_old, n_new):
        real = table[:n_real_old]
        unks = table[n_real_old:]
        mean = real.mean(axis=0, keepdims=True)
        fresh = mean + rng.normal(0.0, noise_std, (n_new + 1, table.shape[1]))
        fresh = fresh.astype(dtype)
        # layout: old real rows | new real rows | old UNK rows | new UNK row
        return np.concatenate([real, fresh[:n_new], unks, fresh[n_new:]], axis=0)

    arrays = OrderedDict()
    for pname, t in model.parameters().items():
        if pname == "emb.question":
            arrays[pname] = grow_table(t.data, old_vocab.total_questions, n_questions)
        elif pname == "emb.kc":
            arrays[pname] = grow_table(t.data, old_vocab.total_kcs, n_kcs)
        elif pname == "emb.dataset":
            row = t.data.mean(axis=0, keepdims=True).astype(dtype)
            arrays[pname] = np.concatenate([t.data, row], axis=0)
        else:
            arrays[pname] = t.data
    config = replace(model.config, n_questions=new_vocab.total_questions,
                     n_kcs=new_vocab.total_kcs, n_datasets=new_vocab.n_datasets)
    return KTModel.from_arrays(config, new_vocab, arrays, dtype=dtype)
