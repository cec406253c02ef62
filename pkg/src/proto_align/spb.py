"""Sentence-prototype memory bank.

A learnable K x D codebook queried by cosine similarity. The hard nearest
prototype is emitted in the forward pass; training relaxes the selection with
a Gumbel-softmax straight-through estimator so gradients reach both the query
embedding and the bank rows through the soft mixture. The querying
distribution itself stays noiseless, which keeps the hard index equal to the
soft argmax at every temperature.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GUMBEL_HI = 0.9
GUMBEL_LO = 0.01


def anneal_temperature(step, total_steps, hi=GUMBEL_HI, lo=GUMBEL_LO):
    """Linear decay from ``hi`` at step 0 to ``lo`` at ``total_steps``, clamped at ``lo``."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if total_steps <= 0:
        return lo
    t = step / total_steps
    if t >= 1.0:
        return lo
    return max(hi + (lo - hi) * t, lo)


def gumbel_softmax(logits, temperature, rng):
    """softmax((logits + g) / temperature) with i.i.d. standard Gumbel g."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    g = rng.gumbel(size=logits.shape)
    z = (logits + g) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def prototype_loss(quantized, queries):
    """Mean L1 distance between quantized rows and their query embeddings.

    Normalized by the total sentence count (rows), not by the feature
    dimension; zero iff every sentence embedding equals its prototype.
    """
    quantized, queries = ad.as_tensor(quantized), ad.as_tensor(queries)
    if quantized.shape != queries.shape or quantized.ndim != 2:
        raise ad.ShapeMismatch(
            f"prototype_loss: need matching (rows, dim) stacks, got "
            f"{quantized.shape} and {queries.shape}")
    if quantized.shape[0] == 0:
        raise ValueError("prototype_loss: empty pair list")
    return ad.scale(ad.l1_norm(ad.sub(quantized, queries)), 1.0 / quantized.shape[0])


class PrototypeBank:
    """K x D memory of sentence prototypes with an annealed relaxation temperature."""

    def __init__(self, k, dim, rng, temperature=GUMBEL_HI):
        if k < 1:
            raise ValueError(f"bank size must be >= 1, got {k}")
        rows = rng.standard_normal((k, dim))
        rows /= np.abs(rows).sum(axis=1, keepdims=True)  # row-wise L1 normalization
        self.prototypes = Tensor(rows, requires_grad=True)
        self.k = k
        self.dim = dim
        self.temperature = float(temperature)
        # hard argmax vs soft-distribution argmax disagreements (must stay 0)
        self.argmax_disagreements = 0

    def query_rows(self, queries, training=False, rng=None):
        """Quantize a (rows, D) stack of query embeddings.

        Returns ``(indices, quantized, dists)``: hard nearest-prototype
        indices (ties to the lowest index), straight-through prototype rows,
        and the noiseless querying distributions at the current temperature.
        """
        queries = ad.as_tensor(queries)
        if queries.ndim != 2 or queries.shape[1] != self.dim:
            raise ad.ShapeMismatch(
                f"query: expected (rows, {self.dim}), got {queries.shape}")
        if np.any(np.linalg.norm(queries.data, axis=1) == 0.0):
            raise ValueError("query: zero-norm query embedding")

        scores = ad.matmul(ad.l2_normalize(queries),
                           ad.transpose(ad.l2_normalize(self.prototypes)))
        indices = np.argmax(scores.data, axis=1)
        dists = ad.softmax(ad.scale(scores, 1.0 / self.temperature), axis=-1)
        self.argmax_disagreements += int(
            np.sum(np.argmax(dists.data, axis=1) != indices))

        if training:
            if rng is None:
                raise ValueError("query: training mode needs an rng for Gumbel noise")
            noise = rng.gumbel(size=scores.shape)
            noisy = ad.add(scores, Tensor(self.temperature * noise))
            weights = ad.softmax(ad.scale(noisy, 1.0 / self.temperature), axis=-1)
        else:
            weights = dists
        mixture = ad.matmul(weights, self.prototypes)
        quantized = ad.substitute_forward(mixture, self.prototypes.data[indices])
        return indices, quantized, dists

    def query(self, q, training=False, rng=None):
        """Single-vector convenience wrapper around :meth:`query_rows`."""
        q = ad.as_tensor(q)
        indices, quantized, dists = self.query_rows(
            ad.reshape(q, (1, q.size)), training=training, rng=rng)
        return int(indices[0]), ad.reshape(quantized, (q.size,)), \
            ad.reshape(dists, (self.k,))
