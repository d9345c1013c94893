"""Episodes, prototypes, Poincaré-ball distances and prototype classification."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hve import tensor as T
from hve.config import EpisodeConfig
from hve.errors import SamplingError


@dataclass
class Episode:
    relations: list  # relation names; position = episode-local id
    support: list  # N lists of K instances
    query: list  # (instance, local id) pairs, N·Q of them

    @property
    def n_way(self):
        return len(self.relations)

    @property
    def k_shot(self):
        return len(self.support[0])


def sample_episode(instances_by_relation, cfg: EpisodeConfig, rng):
    """Draw an N-way K-shot episode with Q queries per relation.

    Relations are chosen without replacement among those owning at least
    K + Q instances; episode-local ids follow relation-name order.
    """
    need = cfg.k_shot + cfg.q_query
    eligible = sorted(r for r, insts in instances_by_relation.items() if len(insts) >= need)
    if len(eligible) < cfg.n_way:
        raise SamplingError(
            f"{cfg.n_way}-way {cfg.k_shot}-shot with {cfg.q_query} queries needs {cfg.n_way} relations "
            f"with >= {need} instances each; only {len(eligible)} qualify "
            f"(short by {cfg.n_way - len(eligible)})"
        )
    picked = sorted(eligible[i] for i in rng.choice(len(eligible), size=cfg.n_way, replace=False))
    support, query = [], []
    for local_id, rel in enumerate(picked):
        pool = instances_by_relation[rel]
        idx = rng.choice(len(pool), size=need, replace=False)
        drawn = [pool[i] for i in idx]
        support.append(drawn[: cfg.k_shot])
        query.extend((inst, local_id) for inst in drawn[cfg.k_shot:])
    return Episode(picked, support, query)


def ball_project(x, eps=1e-5):
    """Pull ``x`` inside the ball of radius ``1 - eps`` (rows independently for 2-D input)."""
    return to_ball(x, eps)[0]


def to_ball(x, eps=1e-5):
    """:func:`ball_project` plus the conformal term ``1 - ‖x'‖²`` of the result.

    For a rescaled point the term is the constant ``eps·(2 - eps)``: its true
    derivative is zero, and evaluating ``1 - sum(x'²)`` at the boundary would
    cancel about eleven significant digits.
    """
    limit = 1.0 - eps
    if x.ndim == 1:
        norm = T.l2norm(x)
        if norm.item() <= limit:
            return x, T.sub(1.0, T.sum_(T.mul(x, x)))
        return T.mul(x, T.div(limit, norm)), T.Tensor(eps * (2.0 - eps))
    pairs = [to_ball(x[i], eps) for i in range(x.shape[0])]
    points = T.concat([T.reshape(p, (1, -1)) for p, _ in pairs], axis=0)
    conformal = T.concat([T.reshape(c, (1,)) for _, c in pairs], axis=0)
    return points, conformal


def hyperbolic_distance(s1, s2, c1=None, c2=None):
    """Poincaré-ball geodesic distance over the last axis.

    Both points must lie strictly inside the unit ball. ``c1``/``c2`` may
    supply precomputed ``1 - ‖s‖²`` terms (see :func:`to_ball`).
    """
    diff = T.sub(s1, s2)
    sq = T.sum_(T.mul(diff, diff), axis=-1)
    a = T.sub(1.0, T.sum_(T.mul(s1, s1), axis=-1)) if c1 is None else c1
    b = T.sub(1.0, T.sum_(T.mul(s2, s2), axis=-1)) if c2 is None else c2
    return T.acosh(T.add(1.0, T.scale(T.div(sq, T.mul(a, b)), 2.0)))


def _unit_weights(alpha):
    return not alpha.requires_grad and bool(np.all(alpha.data == 1.0))


def weighted_distance(alpha, q, p, variant="weighted_embeddings", cq=None, cp=None):
    """Hyperbolic distance after element-wise feature weighting.

    ``weighted_embeddings`` weights both points before the distance;
    ``scalar_mean_alpha`` scales the unweighted distance by ``mean(alpha)``.
    Constant all-one weights reduce exactly to :func:`hyperbolic_distance`.
    """
    if variant == "weighted_embeddings":
        if _unit_weights(alpha):
            return hyperbolic_distance(q, p, cq, cp)
        return hyperbolic_distance(T.mul(alpha, q), T.mul(alpha, p))
    if variant == "scalar_mean_alpha":
        return T.mul(T.mean(alpha, axis=-1), hyperbolic_distance(q, p, cq, cp))
    raise ValueError(f"unknown distance variant {variant!r}")


@dataclass
class PrototypeSet:
    P: T.Tensor  # N×d, inside the ball
    A: T.Tensor  # N×d feature weights
    raw: T.Tensor  # N×d un-projected means
    conformal: T.Tensor = None  # N, 1 - ‖P_i‖²

    @property
    def n_way(self):
        return self.P.shape[0]


def build_prototypes(support, attention=None, eps=1e-5):
    """Prototypes from an ``N×K×d`` support tensor (or a list of ``K×d`` tensors).

    ``attention`` maps a relation's ``K×d`` stack to a weight vector; without
    it every weight is one.
    """
    stacks = [support[i] for i in range(support.shape[0])] if isinstance(support, T.Tensor) else list(support)
    means = T.concat([T.reshape(T.mean(s, axis=0), (1, -1)) for s in stacks], axis=0)
    P, conformal = to_ball(means, eps)
    if attention is None:
        A = T.Tensor(np.ones(P.shape))
    else:
        A = T.concat([T.reshape(attention(s), (1, -1)) for s in stacks], axis=0)
    return PrototypeSet(P, A, means, conformal)


def distances(query, protos, variant="weighted_embeddings", eps=1e-5):
    """Distances from one query embedding to every prototype (length N)."""
    q, cq = to_ball(query, eps)
    n = protos.n_way
    Q = T.expand(q, protos.P.shape)
    return weighted_distance(protos.A, Q, protos.P, variant, T.expand(cq, (n,)), protos.conformal)


def classify(query, protos, variant="weighted_embeddings", eps=1e-5):
    """Relation probabilities ``softmax(-d)`` for one query embedding."""
    return T.softmax(T.neg(distances(query, protos, variant, eps)), axis=0)


def probs_from_distances(d):
    return T.softmax(T.neg(T.as_tensor(d)), axis=0)


def query_nll(query_distances, targets):
    """Mean negative log-likelihood over queries.

    ``query_distances`` is a ``Q_total×N`` tensor of distances, ``targets``
    the true episode-local ids.
    """
    logp = T.log_softmax(T.neg(query_distances), axis=1)
    picked = T.index(logp, (np.arange(len(targets)), np.asarray(targets)))
    return T.neg(T.mean(picked))


def episode_loss(episode, model):
    """Mean ``-log Pr(true relation)`` over the episode's queries (differentiable)."""
    dist, targets, _ = model.episode_distances(episode)
    return query_nll(dist, targets)
