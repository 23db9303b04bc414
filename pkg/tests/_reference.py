"""Independent float64 re-implementation of the network, used as a test oracle.

Deliberately shares no code with embedmatch.model: a straight-line numpy
forward pass kept in 64-bit end to end, so finite-difference gradient checks
are not limited by float32 storage noise.
"""

import numpy as np

LN_EPS = 1e-6
GELU_C = 0.044715
GELU_K = np.sqrt(2.0 / np.pi)


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gain + bias


def _softmax_rows(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_K * (x + GELU_C * x**3)))


def reference_embedding(image, weights, kind):
    """Float64 embedding of an image under the chosen head."""
    cfg = weights.config
    t = {k: v.astype(np.float64) for k, v in weights.tensors.items()}
    ps, c = cfg.patch_size, cfg.channels
    g = cfg.image_size // ps
    x = np.asarray(image, dtype=np.float64)
    patches = x.reshape(g, ps, g, ps, c).transpose(0, 2, 1, 3, 4).reshape(g * g, ps * ps * c)
    tokens = np.vstack([t["cls_token"], patches @ t["patch_proj.w"] + t["patch_proj.b"]])
    tokens = tokens + t["pos_embed"]
    d, dh = cfg.embed_dim, cfg.head_dim
    for i in range(cfg.depth):
        p = f"block{i}."
        h = _layer_norm(tokens, t[p + "attn_norm.g"], t[p + "attn_norm.b"])
        qkv = h @ t[p + "attn.qkv_w"] + t[p + "attn.qkv_b"]
        q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
        heads = []
        for j in range(cfg.num_heads):
            sl = slice(j * dh, (j + 1) * dh)
            attn = _softmax_rows(q[:, sl] @ k[:, sl].T / np.sqrt(dh))
            heads.append(attn @ v[:, sl])
        tokens = tokens + np.hstack(heads) @ t[p + "attn.out_w"] + t[p + "attn.out_b"]
        h = _layer_norm(tokens, t[p + "mlp_norm.g"], t[p + "mlp_norm.b"])
        tokens = tokens + _gelu(h @ t[p + "mlp.fc1_w"] + t[p + "mlp.fc1_b"]) @ t[p + "mlp.fc2_w"] + t[p + "mlp.fc2_b"]
    tokens = _layer_norm(tokens, t["final_norm.g"], t["final_norm.b"])
    return tokens[0] if kind == "class_token" else tokens[1:].mean(axis=0)


def reference_matching_loss(image, target_values, weights, kind):
    """Float64 value of the embedding-matching loss."""
    diff = reference_embedding(image, weights, kind) - np.asarray(target_values, np.float64)
    return 0.5 * float(diff @ diff)


def reference_logits(image, weights, kind):
    e = reference_embedding(image, weights, kind)
    t = weights.tensors
    return e @ t[f"head.{kind}.w"].astype(np.float64) + t[f"head.{kind}.b"].astype(np.float64)
