"""Projection heads from precomputed backbone features into the shared space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hve import tensor as T
from hve.errors import ShapeError


@dataclass
class EncodedInstance:
    H_t: T.Tensor  # n×d_proj token matrix
    r_t: T.Tensor  # pooled text vector
    r_i: T.Tensor | None  # image vector; None when the image path is disabled
    U_o: T.Tensor | None  # m×d_proj projected objects; None when disabled


def _project(x, W, b):
    """``tanh(x·Wᵀ + b)`` for a vector or a row-stacked matrix."""
    z = T.matmul(x, T.transpose(W))
    bias = b if z.ndim == 1 else T.expand(b, z.shape)
    return T.tanh(T.add(z, bias))


def encode_text(tokens, W, b, dropout=0.0, rng=None, training=False):
    """Project an ``n×d_text`` token matrix.

    Returns the per-token matrix ``H_t`` and the pooled vector ``r_t``, which is
    the projection of the mean token row.
    """
    return encode_text_batch([tokens], W, b, dropout, rng, training)[0]


def encode_text_batch(token_mats, W, b, dropout=0.0, rng=None, training=False):
    """:func:`encode_text` for several instances through a single projection."""
    rows, means, spans = [], [], []
    offset = 0
    for tokens in token_mats:
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise ShapeError(f"encode_text: expected n×{W.shape[1]} with n >= 1, got {tokens.shape}")
        if tokens.shape[1] != W.shape[1]:
            raise ShapeError(f"encode_text: token width {tokens.shape[1]} != configured {W.shape[1]}")
        rows.append(tokens)
        means.append(tokens.mean(axis=0))
        spans.append((offset, offset + tokens.shape[0]))
        offset += tokens.shape[0]
    stacked = np.concatenate(rows + [np.stack(means)], axis=0)
    proj = T.dropout(_project(T.Tensor(stacked), W, b), dropout, rng, training)
    return [(T.index(proj, slice(lo, hi)), T.index(proj, offset + i)) for i, (lo, hi) in enumerate(spans)]


def encode_image(image, W, b, dropout=0.0, rng=None, training=False):
    return encode_image_batch([image], W, b, dropout, rng, training)[0]


def encode_image_batch(images, W, b, dropout=0.0, rng=None, training=False):
    images = [np.asarray(im, dtype=np.float64) for im in images]
    for im in images:
        if im.shape != (W.shape[1],):
            raise ShapeError(f"encode_image: feature shape {im.shape} != ({W.shape[1]},)")
    proj = T.dropout(_project(T.Tensor(np.stack(images)), W, b), dropout, rng, training)
    return [T.index(proj, i) for i in range(len(images))]


def object_word_matrix(labels, table, k_obj):
    """Raw ``m×d_o`` matrix for the first ``k_obj`` labels.

    Multi-word labels average their word vectors; words missing from the table
    count as zero vectors.
    """
    if k_obj < 1:
        raise ValueError("k_obj must be >= 1")
    rows = []
    for label in list(labels)[:k_obj]:
        words = label.lower().split()
        vecs = [table.get(w) for w in words]
        vecs = [np.zeros(table.dim) if v is None else v for v in vecs]
        rows.append(np.mean(vecs, axis=0) if vecs else np.zeros(table.dim))
    if not rows:
        return np.zeros((0, table.dim))
    return np.stack(rows)


def embed_objects(labels, table, k_obj, W, b, dropout=0.0, rng=None, training=False):
    """Project object labels to ``U_o`` (``m×d_proj``, ``m = min(k_obj, len(labels))``)."""
    return embed_objects_batch([labels], table, k_obj, W, b, dropout, rng, training)[0]


def embed_objects_batch(label_lists, table, k_obj, W, b, dropout=0.0, rng=None, training=False):
    raws = [object_word_matrix(labels, table, k_obj) for labels in label_lists]
    if table.dim != W.shape[1]:
        raise ShapeError(f"embed_objects: word vectors are {table.dim}-d, W_obj expects {W.shape[1]}")
    total = sum(r.shape[0] for r in raws)
    empty = T.Tensor(np.zeros((0, W.shape[0])))
    if total == 0:
        return [empty for _ in raws]
    proj = T.dropout(_project(T.Tensor(np.concatenate(raws, axis=0)), W, b), dropout, rng, training)
    out, offset = [], 0
    for r in raws:
        m = r.shape[0]
        out.append(T.index(proj, slice(offset, offset + m)) if m else empty)
        offset += m
    return out
