"""Shared numerical test utilities and tiny fixtures."""

import numpy as np

from kttrace.data import DatasetSpec, Interaction, StudentSequence, build_vocab
from kttrace.model import KTModel, ModelConfig


def tiny_vocab(nq=12, nk=6, n_datasets=2):
    specs = [DatasetSpec(f"d{i}", i) for i in range(n_datasets)]
    return build_vocab(specs, {f"d{i}": (nq, nk) for i in range(n_datasets)})


def tiny_config(vocab, n_layers=1, d_model=4, n_head=2, d_ff=6, max_seq_len=16):
    return ModelConfig(n_layers=n_layers, d_model=d_model, n_head=n_head,
                       d_ff=d_ff, dropout=0.0, max_seq_len=max_seq_len).sized_for(vocab)


def build_tiny(seed=0, dtype=np.float64, **kw):
    vocab = tiny_vocab()
    config = tiny_config(vocab, **kw)
    return KTModel.build(config, vocab, seed=seed, dtype=dtype), vocab


def hand_sequences():
    s1 = StudentSequence("a", [
        Interaction(0, (0, 2), 1, 0),
        Interaction(3, (1,), 0, 60),
        Interaction(5, (2, 4), 1, 120),
    ])
    s2 = StudentSequence("b", [
        Interaction(7, (3,), 0, 0),
        Interaction(2, (0,), 1, 60),
        Interaction(2, (0,), 1, 120),
        Interaction(9, (5, 1), 0, 180),
    ])
    return [s1, s2]


def finite_diff(f, arrays, h=1e-5):
    """Central finite differences of a scalar function.

    ``f`` re-evaluates the loss from the current contents of ``arrays``
    (a dict name -> ndarray mutated in place). Arrays must be float64 for
    the differences to be trustworthy.
    """
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            gf[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def max_rel_err(a, b, floor=1e-6):
    """Worst-case elementwise relative error with a small-denominator floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
