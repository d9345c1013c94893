"""Central finite differences against reverse-mode gradients.

Relative error is normwise per tensor, ``max|a - n| / max(max|a|, max|n|, floor)``.
Float64 round-off in the loss alone puts ~1e-9 of noise on every difference
quotient at h = 1e-6, so an elementwise ratio would flag near-zero components
of otherwise well-scaled gradients.
"""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from hve import tensor as T
from hve.config import ModelConfig
from hve.encoders import object_word_matrix  # noqa: F401  (re-exported for tests)
from hve.fewshot import Episode, query_nll
from hve.io import Instance, WordVectorTable

STEP = 1e-6
FLOOR = 1e-3


def numerical_gradient(f, x, h=STEP, coords=None):
    """Central-difference gradient of scalar ``f()`` w.r.t. the array ``x`` (perturbed in place).

    ``coords`` restricts the work to those flat indices; other entries stay zero.
    """
    grad = np.zeros_like(x)
    flat = range(x.size) if coords is None else coords
    for k in flat:
        i = np.unravel_index(k, x.shape)
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor=FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_function(fn, inputs, h=STEP, floor=FLOOR):
    """Compare reverse-mode and numerical gradients of ``fn(*tensors) -> scalar``.

    ``inputs`` are arrays; returns the worst relative error per input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    if out.size != 1:
        out = T.sum_(out)
    out.backward()

    def value():
        with T.no_grad():
            r = fn(*[T.Tensor(a) for a in arrays])
            return float(np.sum(r.data))

    errs = []
    for leaf, arr in zip(leaves, arrays):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        errs.append(relative_error(analytic, numerical_gradient(value, arr, h), floor))
    return errs


def check_model(model, episode, h=STEP, floor=FLOOR, max_coords=None, seed=0):
    """Worst relative error per named parameter for one episode loss.

    Returns ``(errors, analytic_grads)``; both are ordered like ``model.params``.
    Runs in eval mode so the loss is a deterministic function of the weights.
    With ``max_coords`` only that many seeded random entries per tensor are
    differenced (the comparison is restricted to them).
    """
    pick = np.random.default_rng(seed)
    model.eval()
    model.zero_grad()
    dist, targets, _ = model.episode_distances(episode)
    query_nll(dist, targets).backward()
    model.fill_missing_grads()
    analytic = OrderedDict((k, p.grad.copy()) for k, p in model.params.items())

    targets = [label for _, label in episode.query]

    def value():
        with T.no_grad():
            d, _, _ = model.episode_distances(episode)
            return query_nll(d, targets).item()

    # hybrid-attention weights act only on the prototype head, so the
    # (parameter-independent) embeddings can be computed once for them
    with T.no_grad():
        stacks, queries, _ = model.embed_episode(episode)

    def head_value():
        with T.no_grad():
            d, _ = model.head(stacks, queries)
            return query_nll(d, targets).item()

    errors = OrderedDict()
    for name, p in model.params.items():
        f = head_value if name.startswith("hybrid.") else value
        if max_coords is None or p.size <= max_coords:
            errors[name] = relative_error(analytic[name], numerical_gradient(f, p.data, h), floor)
        else:
            coords = np.sort(pick.choice(p.size, size=max_coords, replace=False))
            num = numerical_gradient(f, p.data, h, coords).reshape(-1)[coords]
            errors[name] = relative_error(analytic[name].reshape(-1)[coords], num, floor)
    model.zero_grad()
    return errors, analytic


def tiny_problem(mode="full", seed=0, n_way=3, k_shot=2, q_query=1, d_proj=6, n_tokens=3,
                 distance_variant="weighted_embeddings"):
    """A small random model and episode for tractable finite differences."""
    rng = np.random.default_rng([seed, 99])
    d_text, d_image, d_o = 7, 5, 4
    cfg = ModelConfig(d_proj=d_proj, d_o=d_o, d_text=d_text, d_image=d_image, k_obj=2,
                      k_shot=k_shot, fusion_mode=mode, distance_variant=distance_variant, dropout=0.2)
    words = ["person", "boat", "dog", "tennis", "racket", "car"]
    table = WordVectorTable(d_o, {w: rng.normal(size=d_o) for w in words})
    labels = ["person", "boat", "dog", "tennis racket", "car", "unknownthing"]

    def instance(rel, j):
        n = int(rng.integers(1, n_tokens + 1))
        m = int(rng.integers(0, 4))
        objs = tuple(rng.choice(labels, size=m, replace=False))
        return Instance(
            id=f"{rel}-{j}", relation=rel, tokens_range=(0, n), image_row=0, objects=objs,
            head="h", tail="t", tokens=rng.normal(size=(n, d_text)), image=rng.normal(size=d_image),
        )

    relations = [f"r{i}" for i in range(n_way)]
    support = [[instance(r, j) for j in range(k_shot)] for r in relations]
    query = [(instance(r, k_shot + j), i) for i, r in enumerate(relations) for j in range(q_query)]
    # guarantee at least one query carries objects so object parameters are exercised
    inst, label = query[0]
    query[0] = (Instance(**{**inst.__dict__, "objects": ("person", "tennis racket")}), label)

    from hve.model import MFSHVE

    model = MFSHVE(cfg, table, seed=seed)
    # perturb zero-initialised biases so the check does not sit on a symmetric point
    for name, p in model.params.items():
        if p.ndim == 1:
            p.data = p.data + rng.normal(scale=0.1, size=p.shape)
    return model, Episode(relations, support, query)
