"""Independent numpy reimplementation of the model forward.

Used as an oracle: same architecture, different primitives. Attention is a
per-query loop with explicit softmax-weighted sums (the brute-force form),
masks are built from the raw indicator, layer norm and gelu are written out
directly. Everything runs in f64 numpy with no shared code from the package
beyond parameter names and config arithmetic.
"""

import math

import numpy as np


def _gelu(x):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def _ln(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _brute_attention(q, k, v, mask, scale):
    """q:[S,dh], k/v:[S2,dh], mask:[S,S2] of {0,-inf}: loop every query."""
    S = q.shape[0]
    out = np.zeros((S, v.shape[1]))
    for i in range(S):
        logits = np.array([q[i] @ k[j] * scale + mask[i, j] for j in range(k.shape[0])])
        m = logits.max()
        if m == -np.inf:
            continue
        e = np.exp(logits - m)
        e[logits == -np.inf] = 0.0
        w = e / e.sum()
        out[i] = sum(w[j] * v[j] for j in range(k.shape[0]))
    return out


def _t_features(t, half=16):
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), half))
    args = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def reference_forward(W, cfg, z_t, x, t, text, text_mask, ref_tokens=None,
                      mode="causal", frame_slots=None):
    """W: name -> f64 array. Returns v [B,N,h,w,12]."""
    B, N, h, w, _ = z_t.shape
    p = cfg.patch
    D, nh, dh, k = cfg.width, cfg.heads, cfg.head_dim, cfg.tokens_per_frame

    both = np.concatenate([z_t, x], axis=-1)
    patches = (
        both.reshape(B, N, h // p, p, w // p, p, 24)
        .transpose(0, 1, 2, 4, 3, 5, 6)
        .reshape(B, N * k, p * p * 24)
    )
    tok = patches @ W["in.w"] + W["in.b"]
    slots = np.arange(N) if frame_slots is None else np.asarray(frame_slots)
    slots = slots % cfg.window
    pos = np.concatenate([W["pos"][s] for s in slots], axis=0)  # [Nk, D]
    tok = tok + pos[None]

    n_ref = 0
    if ref_tokens is not None:
        n_ref = ref_tokens.shape[1]
        tok = np.concatenate([ref_tokens, tok], axis=1)
        t_mod = np.concatenate([np.zeros((B, 1)), np.asarray(t, float)], axis=1)
    else:
        t_mod = np.asarray(t, dtype=np.float64)
    S = tok.shape[1]

    # mask straight from the indicator
    mask = np.zeros((S, S))
    for i in range(S):
        for j in range(S):
            if i < n_ref:
                ok = j < n_ref  # reference queries see only the reference block
            elif j < n_ref:
                ok = True  # reference keys visible to every frame
            else:
                fi = (i - n_ref) // k
                fj = (j - n_ref) // k
                ok = True if mode == "bidirectional" else fj <= fi
            if not ok:
                mask[i, j] = -np.inf

    temb = _gelu(_t_features(t_mod) @ W["tmlp.w1"] + W["tmlp.b1"]) @ W["tmlp.w2"] + W["tmlp.b2"]

    # pooled text joins the modulation stream (masked mean over prompt tokens)
    wp = (np.asarray(text_mask) == 0.0).astype(np.float64)
    wp = wp / np.maximum(wp.sum(axis=1, keepdims=True), 1.0)
    temb = temb + (wp[:, :, None] * np.asarray(text, np.float64)).sum(axis=1, keepdims=True)

    scale = 1.0 / math.sqrt(dh)
    for li in range(cfg.layers):
        pre = f"b{li}."
        mod = temb @ W[pre + "mod_w"] + W[pre + "mod_b"]  # [B, NF, 6D]
        mod_tok = np.repeat(mod, k, axis=1)  # one row per token
        sh1, sc1, g1, sh2, sc2, g2 = [mod_tok[..., j * D:(j + 1) * D] for j in range(6)]

        a_in = _ln(tok) * (1 + sc1) + sh1
        qkv = a_in @ W[pre + "qkv_w"] + W[pre + "qkv_b"]
        att = np.zeros((B, S, D))
        for b in range(B):
            for hd in range(nh):
                sl = slice(hd * dh, (hd + 1) * dh)
                q = qkv[b, :, 0:D][:, sl]
                kk = qkv[b, :, D:2 * D][:, sl]
                vv = qkv[b, :, 2 * D:3 * D][:, sl]
                att[b, :, sl] = _brute_attention(q, kk, vv, mask, scale)
        tok = tok + g1 * (att @ W[pre + "attn_o_w"] + W[pre + "attn_o_b"])

        xq = _ln(tok) @ W[pre + "xq_w"] + W[pre + "xq_b"]
        xkv = text @ W[pre + "xkv_w"] + W[pre + "xkv_b"]
        L = text.shape[1]
        xatt = np.zeros((B, S, D))
        xmask = np.broadcast_to(text_mask[:, None, :], (B, S, L))
        for b in range(B):
            for hd in range(nh):
                sl = slice(hd * dh, (hd + 1) * dh)
                xatt[b, :, sl] = _brute_attention(
                    xq[b][:, sl], xkv[b, :, 0:D][:, sl], xkv[b, :, D:2 * D][:, sl],
                    xmask[b], scale,
                )
        tok = tok + xatt @ W[pre + "xo_w"] + W[pre + "xo_b"]

        m_in = _ln(tok) * (1 + sc2) + sh2
        mlp = _gelu(m_in @ W[pre + "mlp_w1"] + W[pre + "mlp_b1"]) @ W[pre + "mlp_w2"] + W[pre + "mlp_b2"]
        tok = tok + g2 * mlp

    fmod = np.repeat(temb @ W["final.mod_w"] + W["final.mod_b"], k, axis=1)
    out = _ln(tok) * (1 + fmod[..., D:2 * D]) + fmod[..., 0:D]
    out = out @ W["final.w"] + W["final.b"]
    if n_ref:
        out = out[:, n_ref:]
    hp, wp = cfg.latent_h // p, cfg.latent_w // p
    return (
        out.reshape(B, N, hp, wp, p, p, 12)
        .transpose(0, 1, 2, 4, 3, 5, 6)
        .reshape(B, N, cfg.latent_h, cfg.latent_w, 12)
    )
