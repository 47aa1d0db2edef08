"""Cross-attention machinery: query aggregation and agent-bridged fusion.

Two attention patterns live here. `ias_aggregate` runs the query pool
through n layers of cross-attention against the concatenated image and
point features (residual attention followed by a residual feed-forward),
producing one aggregated representation per query. `rai_attention` is the
agent bottleneck: the selected agents (scaled by their masks) attend over
projected point and image features to build per-agent summaries, then each
image feature attends over the agent summaries carrying point content and
vice versa, with residual connections. All forward passes have cached
variants whose analytic backward passes are finite-difference checked.

Single head throughout; the softmax temperature is sqrt(C) of the
projected channel width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .numerics import leaky_relu, leaky_relu_backward, softmax, softmax_backward
from .rng import Rng

_FF_SLOPE = 0.01


@dataclass
class IasLayer:
    w_q: np.ndarray   # (C, C)
    w_k: np.ndarray   # (C, C)
    w_v: np.ndarray   # (C, C)
    ff_w1: np.ndarray  # (C, C)
    ff_b1: np.ndarray  # (C,)
    ff_w2: np.ndarray  # (C, C)
    ff_b2: np.ndarray  # (C,)


@dataclass
class AttentionWeights:
    ias_layers: list[IasLayer]
    w_query: np.ndarray  # (C, C) agent projection
    w_point: np.ndarray  # (C, C) point key/value projection
    w_image: np.ndarray  # (C, C) image key/value projection
    pos_lift: np.ndarray  # (3, C) linear lift of 3D coordinates

    @property
    def n_layers(self) -> int:
        return len(self.ias_layers)

    @property
    def channels(self) -> int:
        return self.w_query.shape[0]


def init_attention_weights(c: int, n_layers: int, rng: Rng,
                           scale: float = 0.1) -> AttentionWeights:
    if n_layers < 1:
        raise ConfigurationError("need at least one attention layer")
    layers = []
    for i in range(n_layers):
        r = rng.derive(i)
        layers.append(IasLayer(
            w_q=r.normal(0, scale, (c, c)), w_k=r.normal(0, scale, (c, c)),
            w_v=r.normal(0, scale, (c, c)), ff_w1=r.normal(0, scale, (c, c)),
            ff_b1=np.zeros(c), ff_w2=r.normal(0, scale, (c, c)),
            ff_b2=np.zeros(c)))
    r = rng.derive(n_layers)
    return AttentionWeights(
        ias_layers=layers,
        w_query=r.normal(0, scale, (c, c)),
        w_point=r.normal(0, scale, (c, c)),
        w_image=r.normal(0, scale, (c, c)),
        pos_lift=r.normal(0, scale, (3, c)))


def sinusoidal_grid_encoding(grid_h: int, grid_w: int, c: int) -> np.ndarray:
    """Fixed 2D positional code for a patch grid, flattened row-major."""
    if c % 4:
        raise DimensionError("channel count must be divisible by 4")
    quarter = c // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / max(quarter, 1)))
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    enc = np.zeros((grid_h * grid_w, c))
    r = rows.reshape(-1, 1) * freqs
    q = cols.reshape(-1, 1) * freqs
    enc[:, 0 * quarter:1 * quarter] = np.sin(r)
    enc[:, 1 * quarter:2 * quarter] = np.cos(r)
    enc[:, 2 * quarter:3 * quarter] = np.sin(q)
    enc[:, 3 * quarter:4 * quarter] = np.cos(q)
    return enc


# --- query aggregation over both modalities ---------------------------------

def ias_aggregate(queries, f_i, f_p, weights: AttentionWeights) -> np.ndarray:
    out, _ = ias_aggregate_cached(queries, f_i, f_p, weights)
    return out


def ias_aggregate_cached(queries, f_i, f_p, weights: AttentionWeights):
    q = np.asarray(queries, dtype=np.float64)
    f = np.vstack([np.asarray(f_i, dtype=np.float64),
                   np.asarray(f_p, dtype=np.float64)])
    c = weights.channels
    if q.shape[1] != c or f.shape[1] != c:
        raise DimensionError("channel widths disagree with the weights")
    scale = 1.0 / np.sqrt(c)
    cache = {"f": f, "n_i": np.asarray(f_i).shape[0], "layers": []}
    for layer in weights.ias_layers:
        q_in = q
        q_proj = q_in @ layer.w_q
        k = f @ layer.w_k
        v = f @ layer.w_v
        attn = softmax(q_proj @ k.T * scale, axis=1)
        q_mid = q_in + attn @ v
        h_pre = q_mid @ layer.ff_w1 + layer.ff_b1
        h = leaky_relu(h_pre, _FF_SLOPE)
        q = q_mid + h @ layer.ff_w2 + layer.ff_b2
        cache["layers"].append(
            {"q_in": q_in, "q_proj": q_proj, "k": k, "v": v, "attn": attn,
             "q_mid": q_mid, "h_pre": h_pre, "h": h})
    return q, cache


def ias_backward(weights: AttentionWeights, cache: dict, d_out: np.ndarray):
    """Returns (d_queries, d_f_i, d_f_p, per-layer weight gradients)."""
    f = cache["f"]
    c = weights.channels
    scale = 1.0 / np.sqrt(c)
    dq = np.asarray(d_out, dtype=np.float64)
    df = np.zeros_like(f)
    layer_grads = []
    for layer, lc in zip(reversed(weights.ias_layers), reversed(cache["layers"])):
        d_ff_w2 = lc["h"].T @ dq
        d_ff_b2 = dq.sum(axis=0)
        dh = dq @ layer.ff_w2.T
        dh_pre = leaky_relu_backward(lc["h_pre"], dh, _FF_SLOPE)
        d_ff_w1 = lc["q_mid"].T @ dh_pre
        d_ff_b1 = dh_pre.sum(axis=0)
        dq_mid = dq + dh_pre @ layer.ff_w1.T

        d_attn = dq_mid @ lc["v"].T
        dv = lc["attn"].T @ dq_mid
        d_logits = softmax_backward(lc["attn"], d_attn, axis=1) * scale
        dq_proj = d_logits @ lc["k"]
        dk = d_logits.T @ lc["q_proj"]

        d_w_q = lc["q_in"].T @ dq_proj
        d_w_k = f.T @ dk
        d_w_v = f.T @ dv
        df += dk @ layer.w_k.T + dv @ layer.w_v.T
        dq = dq_mid + dq_proj @ layer.w_q.T
        layer_grads.append({"w_q": d_w_q, "w_k": d_w_k, "w_v": d_w_v,
                            "ff_w1": d_ff_w1, "ff_b1": d_ff_b1,
                            "ff_w2": d_ff_w2, "ff_b2": d_ff_b2})
    layer_grads.reverse()
    n_i = cache["n_i"]
    return dq, df[:n_i], df[n_i:], layer_grads


# --- agent-bridged cross-modal fusion ----------------------------------------

def rai_attention(agents, f_i, f_p, masks, weights: AttentionWeights):
    f_i_out, f_p_out, _ = rai_attention_cached(agents, f_i, f_p, masks, weights)
    return f_i_out, f_p_out


def rai_attention_cached(agents, f_i, f_p, masks, weights: AttentionWeights):
    agents = np.atleast_2d(np.asarray(agents, dtype=np.float64))
    f_i = np.asarray(f_i, dtype=np.float64)
    f_p = np.asarray(f_p, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64).reshape(-1)
    if agents.shape[0] == 0:
        raise ConfigurationError("agent set is empty")
    if masks.shape[0] != agents.shape[0]:
        raise DimensionError("one mask per agent required")
    c = weights.channels
    if agents.shape[1] != c or f_i.shape[1] != c or f_p.shape[1] != c:
        raise DimensionError("channel widths disagree with the weights")
    scale = 1.0 / np.sqrt(c)

    a_masked = agents * masks[:, None]
    q = a_masked @ weights.w_query
    pp = f_p @ weights.w_point
    pi = f_i @ weights.w_image

    iaa = softmax(q @ pp.T * scale, axis=1)   # agents over point keys
    paa = softmax(q @ pi.T * scale, axis=1)   # agents over image keys
    s_p = iaa @ pp                            # point content per agent
    s_i = paa @ pi                            # image content per agent

    hop_i = softmax(pi @ s_p.T * scale, axis=1)  # image features over agents
    hop_p = softmax(pp @ s_i.T * scale, axis=1)  # point features over agents
    f_i_out = f_i + hop_i @ s_p
    f_p_out = f_p + hop_p @ s_i

    cache = {"agents": agents, "masks": masks, "a_masked": a_masked,
             "f_i": f_i, "f_p": f_p, "q": q, "pp": pp, "pi": pi,
             "iaa": iaa, "paa": paa, "s_p": s_p, "s_i": s_i,
             "hop_i": hop_i, "hop_p": hop_p, "scale": scale,
             "attention_maps": {"iaa": iaa, "paa": paa,
                                "hop_i": hop_i, "hop_p": hop_p}}
    return f_i_out, f_p_out, cache


def rai_backward(weights: AttentionWeights, cache: dict,
                 d_f_i_out: np.ndarray, d_f_p_out: np.ndarray):
    """Gradients for the projections, agents, masks, and input features."""
    scale = cache["scale"]
    q, pp, pi = cache["q"], cache["pp"], cache["pi"]
    s_p, s_i = cache["s_p"], cache["s_i"]
    d_f_i_out = np.asarray(d_f_i_out, dtype=np.float64)
    d_f_p_out = np.asarray(d_f_p_out, dtype=np.float64)

    df_i = d_f_i_out.copy()
    df_p = d_f_p_out.copy()
    dpp = np.zeros_like(pp)
    dpi = np.zeros_like(pi)

    # image-side return hop: f_i_out = f_i + hop_i @ s_p
    d_hop_i = d_f_i_out @ s_p.T
    ds_p = cache["hop_i"].T @ d_f_i_out
    d_logits = softmax_backward(cache["hop_i"], d_hop_i, axis=1) * scale
    dpi += d_logits @ s_p
    ds_p += d_logits.T @ pi

    # point-side return hop: f_p_out = f_p + hop_p @ s_i
    d_hop_p = d_f_p_out @ s_i.T
    ds_i = cache["hop_p"].T @ d_f_p_out
    d_logits = softmax_backward(cache["hop_p"], d_hop_p, axis=1) * scale
    dpp += d_logits @ s_i
    ds_i += d_logits.T @ pp

    # agent summaries
    d_iaa = ds_p @ pp.T
    dpp += cache["iaa"].T @ ds_p
    d_paa = ds_i @ pi.T
    dpi += cache["paa"].T @ ds_i

    # agent attention maps
    dq = np.zeros_like(q)
    d_logits = softmax_backward(cache["iaa"], d_iaa, axis=1) * scale
    dq += d_logits @ pp
    dpp += d_logits.T @ q
    d_logits = softmax_backward(cache["paa"], d_paa, axis=1) * scale
    dq += d_logits @ pi
    dpi += d_logits.T @ q

    # projections
    d_w_query = cache["a_masked"].T @ dq
    d_a_masked = dq @ weights.w_query.T
    d_agents = d_a_masked * cache["masks"][:, None]
    d_masks = (d_a_masked * cache["agents"]).sum(axis=1)
    d_w_point = cache["f_p"].T @ dpp
    df_p += dpp @ weights.w_point.T
    d_w_image = cache["f_i"].T @ dpi
    df_i += dpi @ weights.w_image.T

    return {"agents": d_agents, "masks": d_masks, "f_i": df_i, "f_p": df_p,
            "w_query": d_w_query, "w_point": d_w_point, "w_image": d_w_image}


# --- agent-free baseline fusion (plain cross-attention) -----------------------

def direct_cross_fusion(f_i, f_p, weights: AttentionWeights):
    f_i_out, f_p_out, _ = direct_cross_fusion_cached(f_i, f_p, weights)
    return f_i_out, f_p_out


def direct_cross_fusion_cached(f_i, f_p, weights: AttentionWeights):
    f_i = np.asarray(f_i, dtype=np.float64)
    f_p = np.asarray(f_p, dtype=np.float64)
    c = weights.channels
    scale = 1.0 / np.sqrt(c)
    pi = f_i @ weights.w_image
    pp = f_p @ weights.w_point
    attn_i = softmax(pi @ pp.T * scale, axis=1)
    attn_p = softmax(pp @ pi.T * scale, axis=1)
    f_i_out = f_i + attn_i @ pp
    f_p_out = f_p + attn_p @ pi
    cache = {"f_i": f_i, "f_p": f_p, "pi": pi, "pp": pp,
             "attn_i": attn_i, "attn_p": attn_p, "scale": scale}
    return f_i_out, f_p_out, cache


def direct_cross_fusion_backward(weights: AttentionWeights, cache: dict,
                                 d_f_i_out, d_f_p_out):
    scale = cache["scale"]
    pi, pp = cache["pi"], cache["pp"]
    d_f_i_out = np.asarray(d_f_i_out, dtype=np.float64)
    d_f_p_out = np.asarray(d_f_p_out, dtype=np.float64)
    df_i = d_f_i_out.copy()
    df_p = d_f_p_out.copy()

    d_attn_i = d_f_i_out @ pp.T
    dpp = cache["attn_i"].T @ d_f_i_out
    d_logits = softmax_backward(cache["attn_i"], d_attn_i, axis=1) * scale
    dpi = d_logits @ pp
    dpp += d_logits.T @ pi

    d_attn_p = d_f_p_out @ pi.T
    dpi += cache["attn_p"].T @ d_f_p_out
    d_logits = softmax_backward(cache["attn_p"], d_attn_p, axis=1) * scale
    dpp += d_logits @ pi
    dpi += d_logits.T @ pp

    d_w_image = cache["f_i"].T @ dpi
    df_i += dpi @ weights.w_image.T
    d_w_point = cache["f_p"].T @ dpp
    df_p += dpp @ weights.w_point.T
    return {"f_i": df_i, "f_p": df_p, "w_image": d_w_image, "w_point": d_w_point}
