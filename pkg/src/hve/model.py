"""Parameter layout and the end-to-end forward pass over an episode."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from hve import tensor as T
from hve.config import ModelConfig
from hve.encoders import (EncodedInstance, embed_objects_batch, encode_image_batch,
                          encode_text_batch)
from hve.fewshot import build_prototypes, distances, query_nll
from hve.fusion import CONV_CHANNELS, fuse, hybrid_feature_attention

INIT_STREAM = 0
DROPOUT_STREAM = 1

# Parameter groups that a fusion mode never touches.
IMAGE_PARAMS = ("image.W", "image.b", "img_att.W_Q", "img_att.W_K", "img_att.W_V",
                "img_att.ln_gamma", "img_att.ln_beta")
OBJECT_PARAMS = ("object.W", "object.b", "obj_att.W_rt", "obj_att.W_ro", "obj_att.b_ro",
                 "obj_att.W_at", "obj_att.b_at")
HYBRID_PARAMS = ("hybrid.C1", "hybrid.b1", "hybrid.C2", "hybrid.b2", "hybrid.C3", "hybrid.b3")


def param_shapes(cfg: ModelConfig):
    d, a, k = cfg.d_proj, cfg.att_dim, cfg.k_shot
    c1, c2 = CONV_CHANNELS
    return OrderedDict([
        ("text.W", (d, cfg.d_text)), ("text.b", (d,)),
        ("image.W", (d, cfg.d_image)), ("image.b", (d,)),
        ("object.W", (d, cfg.d_o)), ("object.b", (d,)),
        ("img_att.W_Q", (d, d)), ("img_att.W_K", (d, d)), ("img_att.W_V", (d, d)),
        ("img_att.ln_gamma", (d,)), ("img_att.ln_beta", (d,)),
        ("obj_att.W_rt", (a, d)), ("obj_att.W_ro", (a, d)), ("obj_att.b_ro", (a,)),
        ("obj_att.W_at", (1, 2 * a)), ("obj_att.b_at", (1,)),
        ("hybrid.C1", (c1, 1, k, 1)), ("hybrid.b1", (c1,)),
        ("hybrid.C2", (c2, c1, 1, 1)), ("hybrid.b2", (c2,)),
        ("hybrid.C3", (1, c2, 1, 1)), ("hybrid.b3", (1,)),
        ("fuse.W_multi", (d, 3 * d)), ("fuse.b_multi", (d,)),
    ])


def _glorot_bound(shape):
    if len(shape) == 2:
        fan_out, fan_in = shape
    else:
        field = math.prod(shape[2:])
        fan_out, fan_in = shape[0] * field, shape[1] * field
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(cfg: ModelConfig, seed=0):
    """Glorot-uniform weights, zero biases, unit LayerNorm gain."""
    rng = np.random.default_rng([seed, INIT_STREAM])
    params = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if name.endswith("ln_gamma"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            a = _glorot_bound(shape)
            data = rng.uniform(-a, a, size=shape)
        params[name] = T.Tensor(data, requires_grad=True)
    return params


class MFSHVE:
    """Multimodal prototypical relation classifier with hyperbolic distance."""

    def __init__(self, cfg: ModelConfig, table=None, seed=0, params=None):
        self.cfg = cfg
        self.table = table
        self.seed = seed
        self.params = params if params is not None else init_params(cfg, seed)
        self.rng = np.random.default_rng([seed, DROPOUT_STREAM])
        self.training = False
        if cfg.fusion_mode != "text_only" and table is not None and table.dim != cfg.d_o:
            raise ValueError(f"word vectors are {table.dim}-d but model.d_o = {cfg.d_o}")

    # -- state -------------------------------------------------------------

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def fill_missing_grads(self):
        """Give parameters outside the active graph an explicit zero gradient."""
        for p in self.params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, arrays):
        for k, v in arrays.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    # -- forward -------------------------------------------------------------

    @property
    def mode(self):
        return self.cfg.fusion_mode

    def _drop(self):
        return dict(dropout=self.cfg.dropout, rng=self.rng, training=self.training)

    def encode(self, inst):
        return self.encode_many([inst])[0]

    def encode_many(self, instances):
        """Encode instances with one projection per modality."""
        p = self.params
        texts = encode_text_batch([i.tokens for i in instances], p["text.W"], p["text.b"], **self._drop())
        if self.mode == "text_only":
            return [EncodedInstance(H, r, None, None) for H, r in texts]
        if self.table is None:
            raise ValueError(f"fusion mode {self.mode!r} needs a word-vector table")
        images = encode_image_batch([i.image for i in instances], p["image.W"], p["image.b"], **self._drop())
        objects = embed_objects_batch([i.objects for i in instances], self.table, self.cfg.k_obj,
                                      p["object.W"], p["object.b"], **self._drop())
        return [EncodedInstance(H, r, img, U) for (H, r), img, U in zip(texts, images, objects)]

    def embed(self, inst):
        """``L_multi`` for one instance plus the attention weights used."""
        return self.embed_many([inst])[0]

    def embed_many(self, instances):
        return [fuse(enc, self.mode, self.params, self.cfg.ln_eps) for enc in self.encode_many(instances)]

    def hybrid_attention(self, stack):
        p = self.params
        return hybrid_feature_attention(stack, p["hybrid.C1"], p["hybrid.b1"], p["hybrid.C2"],
                                        p["hybrid.b2"], p["hybrid.C3"], p["hybrid.b3"])

    def embed_episode(self, episode):
        """Support stacks (N tensors of ``K×d``) and query embeddings for an episode."""
        support = [inst for shots in episode.support for inst in shots]
        queries = [inst for inst, _ in episode.query]
        fused = self.embed_many(support + queries)
        k = episode.k_shot
        stacks = []
        for i in range(episode.n_way):
            rows = [T.reshape(emb, (1, -1)) for emb, _ in fused[i * k:(i + 1) * k]]
            stacks.append(T.concat(rows, axis=0))
        rest = fused[len(support):]
        return stacks, [emb for emb, _ in rest], [info for _, info in rest]

    def head(self, stacks, queries):
        """Prototypes and the ``Q_total×N`` distance matrix from embeddings."""
        attention = self.hybrid_attention if self.mode == "full" else None
        protos = build_prototypes(stacks, attention, self.cfg.ball_eps)
        rows = [T.reshape(distances(q, protos, self.cfg.distance_variant, self.cfg.ball_eps), (1, -1))
                for q in queries]
        return T.concat(rows, axis=0), protos

    def prototypes(self, episode):
        stacks, _, _ = self.embed_episode(episode)
        attention = self.hybrid_attention if self.mode == "full" else None
        return build_prototypes(stacks, attention, self.cfg.ball_eps)

    def episode_distances(self, episode):
        """``(Q_total×N distances, true ids, info)`` for every query of the episode."""
        stacks, queries, infos = self.embed_episode(episode)
        dist, protos = self.head(stacks, queries)
        targets = [label for _, label in episode.query]
        return dist, targets, {"prototypes": protos, "queries": infos}

    def loss(self, episode):
        dist, targets, _ = self.episode_distances(episode)
        return query_nll(dist, targets)

    def predict(self, episode):
        """Predicted and true episode-local ids for every query (no graph recorded)."""
        with T.no_grad():
            dist, targets, _ = self.episode_distances(episode)
        return np.argmin(dist.data, axis=1), np.asarray(targets)
