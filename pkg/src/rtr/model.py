"""The video transformer that predicts the velocity field.

Input per frame: noisy latent z_t channel-concatenated with the clean source
latent x (12+12=24 channels), 2x2-patchified to k tokens of width D. Blocks
are {self-attention, cross-attention over the text embedding, MLP} with the
per-frame timestep injected through adaptive layer-norm modulation.

Self-attention runs over the token sequence [ref tokens | frame tokens...].
Reference tokens sit at "frame 0": every frame token may attend to them, and
their own queries see only the reference block, which makes their keys and
values independent of whatever frames follow - the property the streaming
cache's pinned anchor relies on.

Masking is frame-block causal: token i may attend token j iff
floor(j/k) <= floor(i/k). Bidirectional mode zeroes the mask (frames only;
reference queries stay restricted in both modes).

The forward supports an external KV context (`ext_kv`) so the streaming
engine can pass cached anchor+window keys and run the current frame alone;
`capture_kv` hands back the keys/values this call produced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import NumericError, ShapeError, Tensor
from .conditioning import L_TEXT, VOCAB_SIZE
from .rng import RngStream

__all__ = [
    "ModelConfig",
    "WindowError",
    "causal_mask",
    "streaming_mask",
    "init_params",
    "param_count",
    "forward",
    "patchify",
    "unpatchify",
    "timestep_features",
    "T_FREQ_DIM",
]

T_FREQ_DIM = 32  # sinusoidal timestep features (16 sin + 16 cos)


class WindowError(ValueError):
    """More frames in one forward than the configured window."""


@dataclass(frozen=True)
class ModelConfig:
    latent_h: int = 16
    latent_w: int = 16
    width: int = 128
    heads: int = 4
    layers: int = 6
    window: int = 8
    vocab: int = VOCAB_SIZE
    patch: int = 2

    def __post_init__(self):
        if self.width % self.heads:
            raise ShapeError(f"width {self.width} not divisible by heads {self.heads}")
        if self.latent_h % self.patch or self.latent_w % self.patch:
            raise ShapeError("latent dims must be divisible by the patch size")

    @property
    def tokens_per_frame(self) -> int:
        return (self.latent_h // self.patch) * (self.latent_w // self.patch)

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def patch_in(self) -> int:
        return self.patch * self.patch * 24  # z_t (12) + source x (12) channels

    @property
    def patch_out(self) -> int:
        return self.patch * self.patch * 12


# ------------------------------------------------------------------- params

def init_params(cfg: ModelConfig, seed: int, dtype: str = "f32") -> dict[str, Tensor]:
    """Fresh trainable parameters.

    Modulation layers and the output head start at zero so every block is
    the identity at step 0; everything else is normal(0, 0.02).
    """
    stream = RngStream(seed, "init")
    D = cfg.width
    params: dict[str, Tensor] = {}

    def normal(name, shape):
        params[name] = Tensor(stream.normal(shape) * 0.02, dtype=dtype, requires_grad=True)

    def zero(name, shape):
        params[name] = T.zeros(shape, dtype=dtype, requires_grad=True)

    normal("cond.table", (cfg.vocab, D))
    normal("cond.pos", (L_TEXT, D))
    normal("cond.ref_w", (cfg.patch_out, D))  # adapter input = 2x2 x 12 latent channels
    zero("cond.ref_b", (D,))
    normal("cond.ref_type", (D,))
    normal("in.w", (cfg.patch_in, D))
    zero("in.b", (D,))
    normal("pos", (cfg.window, cfg.tokens_per_frame, D))
    normal("tmlp.w1", (T_FREQ_DIM, D))
    zero("tmlp.b1", (D,))
    normal("tmlp.w2", (D, D))
    zero("tmlp.b2", (D,))
    for i in range(cfg.layers):
        p = f"b{i}."
        normal(p + "qkv_w", (D, 3 * D))
        zero(p + "qkv_b", (3 * D,))
        normal(p + "attn_o_w", (D, D))
        zero(p + "attn_o_b", (D,))
        normal(p + "xq_w", (D, D))
        zero(p + "xq_b", (D,))
        normal(p + "xkv_w", (D, 2 * D))
        zero(p + "xkv_b", (2 * D,))
        normal(p + "xo_w", (D, D))
        zero(p + "xo_b", (D,))
        normal(p + "mlp_w1", (D, 4 * D))
        zero(p + "mlp_b1", (4 * D,))
        normal(p + "mlp_w2", (4 * D, D))
        zero(p + "mlp_b2", (D,))
        zero(p + "mod_w", (D, 6 * D))
        zero(p + "mod_b", (6 * D,))
    zero("final.mod_w", (D, 2 * D))
    zero("final.mod_b", (2 * D,))
    zero("final.w", (D, cfg.patch_out))
    zero("final.b", (cfg.patch_out,))
    return params


def param_count(params) -> int:
    return sum(p.data.size for p in params.values())


# -------------------------------------------------------------------- masks

def causal_mask(n_frames: int, k: int) -> np.ndarray:
    """Frame-block causal mask: 0 where floor(j/k) <= floor(i/k), else -inf."""
    frame = np.arange(n_frames * k) // k
    allowed = frame[None, :] <= frame[:, None]
    return np.where(allowed, 0.0, -np.inf)


def _seq_mask(n_frames: int, k: int, n_ref: int, mode: str) -> np.ndarray:
    """Mask over [ref | frames] for a joint forward (no external context)."""
    if mode == "causal":
        frames = causal_mask(n_frames, k)
    elif mode == "bidirectional":
        frames = np.zeros((n_frames * k, n_frames * k))
    else:
        raise ValueError(f"unknown attention mode {mode!r}")
    if n_ref == 0:
        return frames
    s = n_ref + n_frames * k
    m = np.zeros((s, s))
    m[:n_ref, n_ref:] = -np.inf  # reference queries see only the reference block
    m[n_ref:, n_ref:] = frames  # frame queries: causal over frames, ref always visible
    return m


def streaming_mask(n_ctx: int, n_frames: int, k: int) -> np.ndarray:
    """Mask for new tokens against [cached context | new tokens].

    Cached context (anchor + window) is fully visible; the new frames are
    block-causal among themselves.
    """
    return np.concatenate(
        [np.zeros((n_frames * k, n_ctx)), causal_mask(n_frames, k)], axis=1
    )


# ------------------------------------------------------serialized sublayers

def patchify(z_t: Tensor, x: Tensor, cfg: ModelConfig, params) -> Tensor:
    """[B,N,h,w,12] + [B,N,h,w,12] -> [B, N*k, D] frame tokens."""
    if z_t.shape != x.shape:
        raise ShapeError(f"patchify: z_t {z_t.shape} vs x {x.shape}")
    B, N, h, w, c = z_t.shape
    p = cfg.patch
    both = T.concat([z_t, x], axis=4)  # [B,N,h,w,24]
    split = T.reshape(both, (B, N, h // p, p, w // p, p, 2 * c))
    ordered = T.permute(split, (0, 1, 2, 4, 3, 5, 6))
    flat = T.reshape(ordered, (B, N * (h // p) * (w // p), p * p * 2 * c))
    return T.add(T.matmul(flat, params["in.w"]), params["in.b"])


def unpatchify(tokens: Tensor, n_frames: int, cfg: ModelConfig) -> Tensor:
    """[B, N*k, patch_out] -> [B, N, h, w, 12]."""
    B = tokens.shape[0]
    p = cfg.patch
    hp, wp = cfg.latent_h // p, cfg.latent_w // p
    grid = T.reshape(tokens, (B, n_frames, hp, wp, p, p, 12))
    ordered = T.permute(grid, (0, 1, 2, 4, 3, 5, 6))
    return T.reshape(ordered, (B, n_frames, cfg.latent_h, cfg.latent_w, 12))


def timestep_features(t: np.ndarray, dtype=np.float32) -> np.ndarray:
    """[B,N] timesteps in [0,1] -> [B,N,T_FREQ_DIM] sinusoidal features."""
    half = T_FREQ_DIM // 2
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), half))
    args = np.asarray(t, dtype=np.float64)[..., None] * freqs
    feats = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    return feats.astype(dtype)


def _heads(x: Tensor, B: int, S: int, h: int, dh: int) -> Tensor:
    return T.permute(T.reshape(x, (B, S, h, dh)), (0, 2, 1, 3))


def _unheads(x: Tensor, B: int, S: int, D: int) -> Tensor:
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (B, S, D))


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return T.add(T.mul(x, T.add(scale, 1.0)), shift)


def forward(
    params,
    cfg: ModelConfig,
    z_t: Tensor,
    x: Tensor,
    t: np.ndarray,
    text: Tensor,
    text_mask: np.ndarray,
    ref_tokens: Tensor | None = None,
    mode: str = "causal",
    frame_slots: np.ndarray | None = None,
    ext_kv: list | None = None,
    ext_xkv: list | None = None,
    attn_mask: np.ndarray | None = None,
    capture_kv: bool = False,
    capture_features: bool = False,
):
    """Predict velocity for N frames. Returns (v, aux).

    z_t, x: Tensor [B,N,h,w,12]; t: array [B,N] in [0,1]; text: [B,L,D];
    text_mask: [B,L] of {0,-inf}; ref_tokens: [B,k,D] or None.

    frame_slots: positional slot per frame (absolute index mod window);
    defaults to arange(N). ext_kv: per-layer (k,v) numpy arrays of cached
    context tokens, shape [B,heads,S_ctx,head_dim]; requires attn_mask over
    [ctx | new]. ext_xkv: per-layer (k,v) for the cross-attention text keys.

    aux: {"kv": per-layer (k,v) of this call's tokens if capture_kv,
    "features": [B,D] pooled mid-block activations if capture_features}.
    """
    B, N = z_t.shape[0], z_t.shape[1]
    D, nh, dh, k = cfg.width, cfg.heads, cfg.head_dim, cfg.tokens_per_frame
    if N > cfg.window:
        raise WindowError(f"{N} frames exceed window {cfg.window}")
    t = np.asarray(t, dtype=np.float64).reshape(B, N)
    for name, arr in (("z_t", z_t.data), ("x", x.data), ("t", t)):
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values in forward input {name}")
    if t.min() < 0.0 or t.max() > 1.0:
        raise ValueError(f"timesteps outside [0,1]: [{t.min()}, {t.max()}]")
    if frame_slots is None:
        frame_slots = np.arange(N)
    frame_slots = np.asarray(frame_slots, dtype=np.int64) % cfg.window

    tokens = patchify(z_t, x, cfg, params)  # [B, Nk, D]
    pos_flat = T.reshape(params["pos"], (cfg.window * k, D))
    pos_ids = (frame_slots[:, None] * k + np.arange(k)[None, :]).reshape(-1)
    tokens = T.add(tokens, T.gather_rows(pos_flat, pos_ids))

    n_ref = 0
    if ref_tokens is not None:
        n_ref = ref_tokens.shape[1]
        if n_ref != k:
            raise ShapeError(f"reference tokens per frame {n_ref} != k {k}")
        tokens = T.concat([ref_tokens, tokens], axis=1)
        t_mod = np.concatenate([np.zeros((B, 1)), t], axis=1)  # ref block sits at t=0
    else:
        t_mod = t
    S = tokens.shape[1]

    if attn_mask is None:
        if ext_kv is not None:
            raise ValueError("ext_kv requires an explicit attn_mask")
        attn_mask = _seq_mask(N, k, n_ref, mode)

    # per-frame modulation vector, expanded to one row per token
    feats = Tensor(timestep_features(t_mod, dtype=params["in.w"].data.dtype.type))
    temb = T.add(T.matmul(feats, params["tmlp.w1"]), params["tmlp.b1"])
    temb = T.add(T.matmul(T.gelu(temb), params["tmlp.w2"]), params["tmlp.b2"])  # [B,NF,D]

    # pooled text in the modulation stream: through cross-attention alone a
    # short prompt reaches the frames as one additive read per layer, too
    # weak to switch the rendered transform; folding the pooled prompt into
    # the per-layer shift/scale/gate input makes the condition multiplicative
    wp = (np.asarray(text_mask) == 0.0).astype(temb.data.dtype)
    wp *= text.shape[1] / np.maximum(wp.sum(axis=1, keepdims=True), 1.0)
    pooled = T.mean_axis(T.mul(text, Tensor(np.repeat(wp[:, :, None], D, axis=2))), 1)
    pooled = T.repeat_interleave(T.reshape(pooled, (B, 1, D)), t_mod.shape[1], axis=1)
    temb = T.add(temb, pooled)

    aux: dict = {}
    if capture_kv:
        aux["kv"] = []
    mid_block = cfg.layers // 2 - 1

    h_tok = tokens
    for i in range(cfg.layers):
        p = f"b{i}."
        mod = T.add(T.matmul(temb, params[p + "mod_w"]), params[p + "mod_b"])  # [B,NF,6D]
        pieces = [
            T.repeat_interleave(T.narrow(mod, 2, j * D, D), k, axis=1) for j in range(6)
        ]
        shift1, scale1, gate1, shift2, scale2, gate2 = pieces

        # self-attention
        a_in = _modulate(T.layer_norm(h_tok), shift1, scale1)
        qkv = T.add(T.matmul(a_in, params[p + "qkv_w"]), params[p + "qkv_b"])
        q = _heads(T.narrow(qkv, 2, 0, D), B, S, nh, dh)
        k_t = _heads(T.narrow(qkv, 2, D, D), B, S, nh, dh)
        v_t = _heads(T.narrow(qkv, 2, 2 * D, D), B, S, nh, dh)
        if capture_kv:
            aux["kv"].append((k_t.data.copy(), v_t.data.copy()))
        if ext_kv is not None:
            ek, ev = ext_kv[i]
            k_all = T.concat([Tensor(ek, dtype=k_t.dtype), k_t], axis=2)
            v_all = T.concat([Tensor(ev, dtype=v_t.dtype), v_t], axis=2)
        else:
            k_all, v_all = k_t, v_t
        scores = T.mul(T.matmul(q, T.permute(k_all, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = T.softmax_lastdim(scores, mask=attn_mask)
        o = _unheads(T.matmul(attn, v_all), B, S, D)
        o = T.add(T.matmul(o, params[p + "attn_o_w"]), params[p + "attn_o_b"])
        h_tok = T.add(h_tok, T.mul(gate1, o))

        # cross-attention over the text embedding
        xq = T.add(T.matmul(T.layer_norm(h_tok), params[p + "xq_w"]), params[p + "xq_b"])
        xq = _heads(xq, B, S, nh, dh)
        if ext_xkv is not None:
            xk = Tensor(ext_xkv[i][0], dtype=h_tok.dtype)
            xv = Tensor(ext_xkv[i][1], dtype=h_tok.dtype)
        else:
            xkv = T.add(T.matmul(text, params[p + "xkv_w"]), params[p + "xkv_b"])
            L = text.shape[1]
            xk = _heads(T.narrow(xkv, 2, 0, D), B, L, nh, dh)
            xv = _heads(T.narrow(xkv, 2, D, D), B, L, nh, dh)
        xscores = T.mul(T.matmul(xq, T.permute(xk, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        xattn = T.softmax_lastdim(xscores, mask=text_mask[:, None, None, :])
        xo = _unheads(T.matmul(xattn, xv), B, S, D)
        xo = T.add(T.matmul(xo, params[p + "xo_w"]), params[p + "xo_b"])
        h_tok = T.add(h_tok, xo)

        # MLP
        m_in = _modulate(T.layer_norm(h_tok), shift2, scale2)
        m = T.add(T.matmul(m_in, params[p + "mlp_w1"]), params[p + "mlp_b1"])
        m = T.add(T.matmul(T.gelu(m), params[p + "mlp_w2"]), params[p + "mlp_b2"])
        h_tok = T.add(h_tok, T.mul(gate2, m))

        if capture_features and i == mid_block:
            aux["features"] = T.mean_axis(h_tok, 1)  # [B,D]

    fmod = T.add(T.matmul(temb, params["final.mod_w"]), params["final.mod_b"])
    fshift = T.repeat_interleave(T.narrow(fmod, 2, 0, D), k, axis=1)
    fscale = T.repeat_interleave(T.narrow(fmod, 2, D, D), k, axis=1)
    out = _modulate(T.layer_norm(h_tok), fshift, fscale)
    out = T.add(T.matmul(out, params["final.w"]), params["final.b"])
    if n_ref:
        out = T.narrow(out, 1, n_ref, N * k)  # reference rows carry no velocity
    v = unpatchify(out, N, cfg)
    return v, aux
