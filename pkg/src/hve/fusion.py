"""Cross-modal fusion: image-guided, object-guided and hybrid feature attention."""
from __future__ import annotations

import math

import numpy as np

from hve import tensor as T
from hve.errors import ShapeError

CONV_CHANNELS = (32, 64)


def image_guided_attention(r_i, H_t, r_t, W_Q, W_K, W_V, gamma, beta, eps=1e-5):
    """Image vector queries the token matrix; residual onto ``r_t`` then LayerNorm.

    Returns ``(r̂_i, weights over tokens)``.
    """
    if H_t.ndim != 2 or H_t.shape[0] < 1:
        raise ShapeError(f"image_guided_attention: need n×d tokens with n >= 1, got {H_t.shape}")
    d_k = W_K.shape[0]
    q = T.matmul(W_Q, r_i)
    keys = T.matmul(H_t, T.transpose(W_K))
    values = T.matmul(H_t, T.transpose(W_V))
    scores = T.scale(T.matmul(keys, q), 1.0 / math.sqrt(d_k))
    alpha = T.softmax(scores, axis=0)
    attended = T.matmul(alpha, values)
    return T.layer_norm(T.add(r_t, attended), gamma, beta, eps), alpha


def object_guided_attention(r_t, U_o, W_rt, W_ro, b_ro, W_at, b_at):
    """Attention over projected objects conditioned on the sentence vector.

    Objects are processed in a canonical (lexicographic) order so the pooled
    output is bit-identical under any permutation of ``U_o``; the returned
    weights follow the caller's order. With no objects the output is zero.
    """
    m, d = U_o.shape
    if m == 0:
        return T.Tensor(np.zeros(d)), T.Tensor(np.zeros(0))
    order = np.lexsort(U_o.data.T[::-1])
    restore = np.argsort(order)
    U = T.index(U_o, order)
    text = T.expand(T.matmul(W_rt, r_t), (m, W_rt.shape[0]))
    objs = T.add(T.matmul(U, T.transpose(W_ro)), T.expand(b_ro, (m, W_ro.shape[0])))
    hidden = T.tanh(T.concat([text, objs], axis=1))
    scores = T.add(T.reshape(T.matmul(hidden, T.transpose(W_at)), (m,)), T.expand(b_at, (m,)))
    alpha = T.softmax(scores, axis=0)
    return T.matmul(alpha, U), T.index(alpha, restore)


def hybrid_feature_attention(stack, C1, b1, C2, b2, C3, b3):
    """Per-feature weights in (0, 1) from a relation's ``K×d`` support stack.

    The first convolution's ``(K, 1)`` kernel collapses the shot axis; two
    ``1×1`` convolutions follow (ReLU, ReLU, sigmoid).
    """
    k_cfg = C1.shape[2]
    if stack.ndim != 2 or stack.shape[0] != k_cfg:
        raise ShapeError(f"hybrid_feature_attention: support stack {stack.shape} needs {k_cfg} rows")
    d = stack.shape[1]
    x = T.reshape(stack, (1, k_cfg, d))
    x = T.relu(T.conv2d(x, C1, b1))
    x = T.relu(T.conv2d(x, C2, b2))
    x = T.sigmoid(T.conv2d(x, C3, b3))
    return T.reshape(x, (d,))


def cross_modal(r_t, r_o_hat, r_i_hat, W_multi, b_multi):
    """Final instance embedding ``tanh(W_multi·[r_t ⊕ r̂_o ⊕ r̂_i] + b_multi)``."""
    return T.tanh(T.add(T.matmul(W_multi, T.concat([r_t, r_o_hat, r_i_hat], axis=0)), b_multi))


def fuse(enc, mode, p, ln_eps=1e-5):
    """Fuse an encoded instance into ``L_multi`` under a fusion mode.

    ``p`` maps parameter names to tensors (see :mod:`hve.model`). Returns
    ``(L_multi, info)`` where ``info`` holds the attention weights computed.
    """
    d = enc.r_t.shape[0]
    zeros = T.Tensor(np.zeros(d))
    info = {}
    if mode == "text_only":
        return cross_modal(enc.r_t, zeros, zeros, p["fuse.W_multi"], p["fuse.b_multi"]), info
    if mode == "concat":
        objs = T.mean(enc.U_o, axis=0) if enc.U_o.shape[0] else zeros
        return cross_modal(enc.r_t, objs, enc.r_i, p["fuse.W_multi"], p["fuse.b_multi"]), info

    r_i_hat = zeros
    r_o_hat = zeros
    if mode in ("image_attention", "image_object", "full"):
        r_i_hat, a_img = image_guided_attention(
            enc.r_i, enc.H_t, enc.r_t,
            p["img_att.W_Q"], p["img_att.W_K"], p["img_att.W_V"],
            p["img_att.ln_gamma"], p["img_att.ln_beta"], ln_eps,
        )
        info["token_attention"] = a_img
    if mode in ("object_attention", "image_object", "full"):
        r_o_hat, a_obj = object_guided_attention(
            enc.r_t, enc.U_o,
            p["obj_att.W_rt"], p["obj_att.W_ro"], p["obj_att.b_ro"],
            p["obj_att.W_at"], p["obj_att.b_at"],
        )
        info["object_attention"] = a_obj
    if mode not in ("image_attention", "object_attention", "image_object", "full"):
        raise ValueError(f"unknown fusion mode {mode!r}")
    return cross_modal(enc.r_t, r_o_hat, r_i_hat, p["fuse.W_multi"], p["fuse.b_multi"]), info
