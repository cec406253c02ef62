"""Image and report encoders plus the four projection heads.

The image side is a small conv stack (3x3 kernels, stride-2 blocks, ReLU)
ending in a g x g grid of sub-region features; the report side is a token
embedding, one within-sentence self-attention mixing layer, and per-sentence
attention pooling. Global representations come from learned-query attention
pooling over the localized features, never from a special token. Reports are
re-ordered canonically (by token-id sequence) on entry so every downstream
reduction is independent of the sentence order a caller happens to use; the
original order is kept for ground-truth lookups.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_BIAS = 1e30  # (mask - 1) * MASK_BIAS: exp underflows to exactly 0 after max-subtraction


class AttentionPool:
    """Single-head pooling with one learned query vector.

    Output is a convex combination of value-projected rows; pooling a single
    row returns that row's value projection.
    """

    def __init__(self, dim, rng):
        scale = 1.0 / math.sqrt(dim)
        self.query = Tensor(rng.standard_normal(dim) * scale, requires_grad=True)
        self.key_w = Tensor(rng.standard_normal((dim, dim)) * scale, requires_grad=True)
        self.value_w = Tensor(rng.standard_normal((dim, dim)) * scale, requires_grad=True)
        self.dim = dim

    def __call__(self, rows, mask=None, return_weights=False):
        rows = ad.as_tensor(rows)
        if rows.shape[-2] < 1:
            raise ValueError("attention pool needs at least one row")
        keys = ad.matmul(rows, ad.transpose(self.key_w))
        scores = ad.matmul(keys, ad.reshape(self.query, (self.dim, 1)))
        scores = ad.reshape(ad.scale(scores, 1.0 / math.sqrt(self.dim)),
                            rows.shape[:-1])
        if mask is not None:
            scores = ad.add(scores, Tensor((np.asarray(mask) - 1.0) * MASK_BIAS))
        weights = ad.softmax(scores, axis=-1)
        values = ad.matmul(rows, ad.transpose(self.value_w))
        pooled = ad.matmul(ad.reshape(weights, weights.shape[:-1] + (1, weights.shape[-1])),
                           values)
        pooled = ad.reshape(pooled, rows.shape[:-2] + (self.dim,))
        if return_weights:
            return pooled, weights
        return pooled

    def parameters(self, prefix):
        return {f"{prefix}.query": self.query,
                f"{prefix}.key_w": self.key_w,
                f"{prefix}.value_w": self.value_w}


class Mlp:
    """Two-layer projection: linear -> ReLU -> linear."""

    def __init__(self, in_dim, hidden, out_dim, rng):
        self.w1 = Tensor(rng.standard_normal((hidden, in_dim)) / math.sqrt(in_dim),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.standard_normal((out_dim, hidden)) / math.sqrt(hidden),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x):
        return ad.affine(ad.relu(ad.affine(x, self.w1, self.b1)), self.w2, self.b2)

    def parameters(self, prefix):
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


class ProjectionHeads:
    """Four independent MLPs into the common space of dimension D.

    The global-report head consumes the pooled post-quantization vector,
    which already lives in the common space, hence its D input width.
    """

    def __init__(self, image_dim, report_dim, common_dim, rng):
        self.global_image = Mlp(image_dim, common_dim, common_dim, rng)
        self.local_image = Mlp(image_dim, common_dim, common_dim, rng)
        self.global_report = Mlp(common_dim, common_dim, common_dim, rng)
        self.local_report = Mlp(report_dim, common_dim, common_dim, rng)

    def parameters(self, prefix="heads"):
        out = {}
        out.update(self.global_image.parameters(f"{prefix}.global_image"))
        out.update(self.local_image.parameters(f"{prefix}.local_image"))
        out.update(self.global_report.parameters(f"{prefix}.global_report"))
        out.update(self.local_report.parameters(f"{prefix}.local_report"))
        return out


@dataclass
class ImageFeatures:
    """Per-sub-region and pooled image representations, raw and projected."""

    local: Tensor            # (B, M_I, C_I)
    pooled: Tensor           # (B, C_I)
    projected_local: Tensor  # (B, M_I, D)
    projected_global: Tensor  # (B, D)

    @property
    def m_i(self):
        return self.local.shape[1]


class ImageEncoder:
    """Conv stack from (size, size, channels_in) to a grid of sub-regions."""

    def __init__(self, rng, size=32, channels_in=3, channels=(16, 32, 64)):
        self.size = size
        self.channels_in = channels_in
        self.grid = size // (2 ** len(channels))
        if self.grid < 1:
            raise ValueError("too many stride-2 blocks for this image size")
        self.out_dim = channels[-1]
        self.layers = []
        cin = channels_in
        for i, cout in enumerate(channels):
            w = Tensor(rng.standard_normal((3, 3, cin, cout))
                       * math.sqrt(2.0 / (9 * cin)), requires_grad=True)
            b = Tensor(np.zeros(cout), requires_grad=True)
            self.layers.append((w, b))
            cin = cout
        self.pool = AttentionPool(self.out_dim, rng)

    def encode(self, images, heads):
        """Encode a batch (B, H, W, C) into :class:`ImageFeatures`."""
        x = ad.as_tensor(images)
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        expected = (self.size, self.size, self.channels_in)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"image geometry mismatch: expected (B,) + {expected}, "
                             f"got {x.shape}")
        for w, b in self.layers:
            x = ad.relu(ad.add(ad.conv2d(x, w, stride=2, pad=1), b))
        b_sz = x.shape[0]
        local = ad.reshape(x, (b_sz, self.grid * self.grid, self.out_dim))
        pooled = self.pool(local)
        return ImageFeatures(
            local=local,
            pooled=pooled,
            projected_local=heads.local_image(local),
            projected_global=heads.global_image(pooled),
        )

    def parameters(self, prefix="image_encoder"):
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"{prefix}.conv{i}.w"] = w
            out[f"{prefix}.conv{i}.b"] = b
        out.update(self.pool.parameters(f"{prefix}.pool"))
        return out


@dataclass
class ReportFeatures:
    """Sentence-level and pooled report representations.

    Sentences are stored flattened across the batch in canonical order;
    ``offsets`` delimits reports, ``orders[i][u]`` is the original index of
    canonical sentence u in report i, and ``padded_post``/``sentence_mask``
    give the (B, M_max, D) layout used by batched attention.
    """

    sentence_pre: Tensor     # (S, C_R) pre-quantization sentence embeddings
    sentence_query: Tensor   # (S, D) after the local-report head
    sentence_post: Tensor    # (S, D) after the memory-bank hook
    padded_post: Tensor      # (B, M_max, D), zero rows past each report's count
    sentence_mask: np.ndarray  # (B, M_max) floats in {0, 1}
    global_pooled: Tensor    # (B, D)
    counts: list             # sentences per report
    orders: list             # canonical -> original sentence index, per report
    offsets: np.ndarray      # (B + 1,) flat row ranges per report

    @property
    def total_sentences(self):
        return int(self.offsets[-1])

    def report_rows(self, i):
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))


class ReportEncoder:
    """Token embedding + one within-sentence self-attention layer + pooling."""

    def __init__(self, rng, vocab_size, embed_dim=64, common_dim=64):
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.common_dim = common_dim
        self.embedding = Tensor(rng.standard_normal((vocab_size, embed_dim)) * 0.1,
                                requires_grad=True)
        scale = 1.0 / math.sqrt(embed_dim)
        self.mix_q = Tensor(rng.standard_normal((embed_dim, embed_dim)) * scale,
                            requires_grad=True)
        self.mix_k = Tensor(rng.standard_normal((embed_dim, embed_dim)) * scale,
                            requires_grad=True)
        self.mix_v = Tensor(rng.standard_normal((embed_dim, embed_dim)) * scale,
                            requires_grad=True)
        self.sentence_pool = AttentionPool(embed_dim, rng)
        self.global_pool = AttentionPool(common_dim, rng)

    def _validate(self, reports):
        if not reports:
            raise ValueError("empty report batch")
        for i, report in enumerate(reports):
            if len(report) == 0:
                raise ValueError(f"report {i} has no sentences")
            for sent in report:
                if len(sent) == 0:
                    raise ValueError(f"report {i} contains an empty sentence")
                for tok in sent:
                    if not 0 <= tok < self.vocab_size:
                        raise ValueError(f"report {i}: token id {tok} outside "
                                         f"vocabulary of size {self.vocab_size}")

    def encode(self, reports, local_head=None, sentence_hook=None, global_head=None):
        """Encode token-id reports into :class:`ReportFeatures`.

        ``local_head`` projects sentence embeddings into the common space;
        ``sentence_hook`` is the memory-bank update applied before the global
        pool (identity when absent); ``global_head`` finishes the pooled
        global representation.
        """
        self._validate(reports)
        orders = [np.array(sorted(range(len(rep)), key=lambda u: tuple(rep[u])),
                           dtype=np.int64) for rep in reports]
        sents = [rep[u] for rep, order in zip(reports, orders) for u in order]
        counts = [len(rep) for rep in reports]
        offsets = np.concatenate([[0], np.cumsum(counts)])
        s_total = len(sents)
        t_max = max(len(s) for s in sents)

        ids = np.zeros((s_total, t_max), dtype=np.int64)
        token_mask = np.zeros((s_total, t_max))
        for r, sent in enumerate(sents):
            ids[r, :len(sent)] = sent
            token_mask[r, :len(sent)] = 1.0

        tokens = ad.reshape(ad.gather_rows(self.embedding, ids.reshape(-1)),
                            (s_total, t_max, self.embed_dim))
        mixed = ad.add(tokens, self._mix(tokens, token_mask))
        pre = self.sentence_pool(mixed, mask=token_mask)

        query = local_head(pre) if local_head is not None else pre
        post = sentence_hook(query) if sentence_hook is not None else query

        m_max = max(counts)
        pad_row = s_total  # index of the all-zeros row appended below
        pad_idx = np.full((len(reports), m_max), pad_row, dtype=np.int64)
        sent_mask = np.zeros((len(reports), m_max))
        for i, c in enumerate(counts):
            pad_idx[i, :c] = np.arange(offsets[i], offsets[i + 1])
            sent_mask[i, :c] = 1.0
        with_zero = ad.concat([post, Tensor(np.zeros((1, post.shape[1])))], axis=0)
        padded = ad.reshape(ad.gather_rows(with_zero, pad_idx.reshape(-1)),
                            (len(reports), m_max, post.shape[1]))

        pooled = self.global_pool(padded, mask=sent_mask)
        if global_head is not None:
            pooled = global_head(pooled)
        return ReportFeatures(
            sentence_pre=pre, sentence_query=query, sentence_post=post,
            padded_post=padded, sentence_mask=sent_mask, global_pooled=pooled,
            counts=counts, orders=orders, offsets=offsets,
        )

    def _mix(self, tokens, token_mask):
        q = ad.matmul(tokens, ad.transpose(self.mix_q))
        k = ad.matmul(tokens, ad.transpose(self.mix_k))
        v = ad.matmul(tokens, ad.transpose(self.mix_v))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))),
                          1.0 / math.sqrt(self.embed_dim))
        bias = (token_mask[:, None, :] - 1.0) * MASK_BIAS
        attn = ad.softmax(ad.add(scores, Tensor(bias)), axis=-1)
        return ad.matmul(attn, v)

    def parameters(self, prefix="report_encoder"):
        out = {f"{prefix}.embedding": self.embedding,
               f"{prefix}.mix_q": self.mix_q,
               f"{prefix}.mix_k": self.mix_k,
               f"{prefix}.mix_v": self.mix_v}
        out.update(self.sentence_pool.parameters(f"{prefix}.sentence_pool"))
        out.update(self.global_pool.parameters(f"{prefix}.global_pool"))
        return out
