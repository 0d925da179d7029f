"""Streaming inference engine: per-frame few-step denoising over a rolling
KV cache with reference anchoring and live condition switching.

Per generated frame the engine runs one joint t=0 context pass over the
history window (recomputing the ring's K/V against the current window
composition, which is what keeps windowed equivalence exact), then K
incremental denoise passes of the new frame against {anchor, window KV,
itself}, then one t=0 capture pass that writes the clean frame's K/V into
the ring. Only the K denoise passes are generator forwards; the other two
are cache maintenance and are counted separately.

The anchored reference block is context-free: reference queries attend only
to the reference block, and masked softmax gives exact zeros elsewhere, so
its K/V captured once are bit-identical to what any joint forward would
produce. With preserve_ref=False the reference block instead occupies one
window slot and is dropped at the first eviction.
"""

from __future__ import annotations

import hashlib
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import codec
from . import tensor as T
from .checkpoint import arrays_to_params, load_checkpoint
from .conditioning import build_condition
from .model import ModelConfig, forward, streaming_mask
from .rng import RngStream
from .tensor import NumericError, Tensor
from .training import DEFAULT_SCHEDULE, fm_interpolate

__all__ = [
    "SessionFailed",
    "LayerKVCache",
    "CrossCondCache",
    "StreamSession",
    "init_session",
    "make_session",
]


class SessionFailed(RuntimeError):
    """Raised when a session is used after a numeric failure poisoned it."""


@dataclass
class LayerKVCache:
    """Anchored reference block plus a ring of per-frame (K,V) slots."""

    anchored: tuple | None = None
    ring: deque = field(default_factory=deque)  # entries (frame_id, k, v)

    def append(self, frame_id: int, k: np.ndarray, v: np.ndarray, w_max: int):
        self.ring.append((frame_id, k, v))
        if len(self.ring) > w_max:
            self.ring.popleft()

    def refresh(self, frame_id: int, k: np.ndarray, v: np.ndarray):
        for i, (fid, _, _) in enumerate(self.ring):
            if fid == frame_id:
                self.ring[i] = (frame_id, k, v)
                return

    def truncate_to_newest(self):
        while len(self.ring) > 1:
            self.ring.popleft()

    def ids(self) -> list:
        return [fid for fid, _, _ in self.ring]


@dataclass
class CrossCondCache:
    """Per-layer (K,V) of the current text embedding."""

    layers: list


def _build_cross_cache(params, cfg: ModelConfig, text_b: Tensor) -> CrossCondCache:
    D, h, dh = cfg.width, cfg.heads, cfg.head_dim
    L = text_b.shape[1]
    layers = []
    with T.no_grad():
        for i in range(cfg.layers):
            xkv = T.add(T.matmul(text_b, params[f"b{i}.xkv_w"]),
                        params[f"b{i}.xkv_b"]).numpy()
            xk = xkv[..., :D].reshape(1, L, h, dh).transpose(0, 2, 1, 3)
            xv = xkv[..., D:].reshape(1, L, h, dh).transpose(0, 2, 1, 3)
            layers.append((np.ascontiguousarray(xk), np.ascontiguousarray(xv)))
    return CrossCondCache(layers)


def _build_anchor(params, cfg: ModelConfig, ref_b: Tensor, text_b: Tensor,
                  mask_b: np.ndarray) -> list:
    """Reference tokens' per-layer (K,V), captured from one t=0 pass.

    The accompanying zero frame is irrelevant: reference rows attend only to
    themselves, so their captured K/V are context-free (exactly, not
    approximately).
    """
    n_ref = ref_b.shape[1]
    zero = Tensor(np.zeros((1, 1, cfg.latent_h, cfg.latent_w, 12), dtype=np.float32))
    with T.no_grad():
        _, aux = forward(params, cfg, zero, zero, np.zeros((1, 1)), text_b,
                         mask_b, ref_tokens=ref_b, mode="causal",
                         capture_kv=True)
    return [(kk[:, :, :n_ref].copy(), vv[:, :, :n_ref].copy())
            for kk, vv in aux["kv"]]


class StreamSession:
    """One strictly serialized ingest -> denoise -> emit pipeline."""

    def __init__(self, params, cfg: ModelConfig, mode, prompt_ids,
                 ref_frame=None, *, seed=0, schedule=None, preserve_ref=True):
        if cfg.window < 2:
            raise ValueError(f"window {cfg.window} too small for streaming")
        self.params = params
        self.cfg = cfg
        self.schedule = schedule or DEFAULT_SCHEDULE
        self.preserve_ref = preserve_ref
        self.stream = RngStream(seed, "stream.session")
        self.layers = [LayerKVCache() for _ in range(cfg.layers)]
        self.frames: deque = deque()  # (frame_id, z0 [1,1,...], x [1,1,...])
        self.frame_count = 0
        self.poisoned = False
        self.latencies: list = []
        self.counters = {"denoise_forwards": 0, "context_passes": 0,
                         "capture_passes": 0}
        self._apply_condition(*self._condition_state(mode, prompt_ids, ref_frame))

    # ------------------------------------------------------------ helpers

    def _condition_state(self, mode, prompt_ids, ref_frame):
        if ref_frame is not None:
            ref_frame = np.asarray(ref_frame, dtype=np.float32)
            want = (self.cfg.latent_h * 2, self.cfg.latent_w * 2, 3)
            if ref_frame.shape != want:
                raise ValueError(
                    f"reference frame shape {ref_frame.shape} does not match "
                    f"model dims {want}")
        cond = build_condition(mode, list(prompt_ids), self.params,
                               ref_frame=ref_frame)
        with T.no_grad():
            text_b = T.reshape(cond.text, (1,) + cond.text.shape)
            ref_b = None
            if cond.ref_tokens is not None:
                ref_b = T.reshape(cond.ref_tokens, (1,) + cond.ref_tokens.shape)
        mask_b = cond.text_mask[None, :]
        cross = _build_cross_cache(self.params, self.cfg, text_b)
        anchor = None
        if mode == "rv2v":
            anchor = _build_anchor(self.params, self.cfg, ref_b, text_b, mask_b)
        return mode, text_b, mask_b, cross, anchor

    def _apply_condition(self, mode, text_b, mask_b, cross, anchor):
        self.mode = mode
        self.text_b = text_b
        self.mask_b = mask_b
        self.cross = cross
        self.anchor = anchor
        for i, layer in enumerate(self.layers):
            layer.anchored = anchor[i] if anchor is not None else None

    def _check_live(self):
        if self.poisoned:
            raise SessionFailed("session poisoned by a prior numeric error")

    def _hist_budget(self) -> int:
        w = self.cfg.window
        if self.anchor is not None and not self.preserve_ref:
            return w - 2  # the unanchored reference occupies a window slot
        return w - 1

    # --------------------------------------------------------- operations

    def process_frame(self, source: np.ndarray) -> np.ndarray:
        """Encode source pixels, denoise one frame, emit pixels."""
        self._check_live()
        t_start = time.perf_counter()
        try:
            out = self._generate(np.asarray(source, dtype=np.float32))
        except NumericError:
            self.poisoned = True
            raise
        self.latencies.append(time.perf_counter() - t_start)
        return out

    def _generate(self, source: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        k = cfg.tokens_per_frame
        want = (cfg.latent_h * 2, cfg.latent_w * 2, 3)
        if source.shape != want:
            raise ValueError(f"source frame shape {source.shape} != {want}")
        x_n = codec.encode(source)[None, None]  # [1,1,h,w,12]
        frame_id = self.frame_count + 1
        pts = self.schedule.points

        budget = self._hist_budget()
        hist = list(self.frames)[-budget:] if budget > 0 else []
        H = len(hist)
        n_anchor = self.anchor[0][0].shape[2] if self.anchor is not None else 0

        hist_kv = None
        if H:
            z_hist = Tensor(np.concatenate([e[1] for e in hist], axis=1))
            x_hist = Tensor(np.concatenate([e[2] for e in hist], axis=1))
            slots = np.asarray([e[0] % cfg.window for e in hist])
            with T.no_grad():
                _, aux = forward(
                    self.params, cfg, z_hist, x_hist, np.zeros((1, H)),
                    self.text_b, self.mask_b, mode="causal",
                    frame_slots=slots, ext_kv=self.anchor,
                    ext_xkv=self.cross.layers,
                    attn_mask=streaming_mask(n_anchor, H, k), capture_kv=True)
            hist_kv = aux["kv"]
            self.counters["context_passes"] += 1
            for i, layer in enumerate(self.layers):
                kk, vv = hist_kv[i]
                for j, entry in enumerate(hist):
                    layer.refresh(entry[0],
                                  kk[:, :, j * k:(j + 1) * k].copy(),
                                  vv[:, :, j * k:(j + 1) * k].copy())

        if self.anchor is not None and H:
            ctx = [(np.concatenate([self.anchor[i][0], hist_kv[i][0]], axis=2),
                    np.concatenate([self.anchor[i][1], hist_kv[i][1]], axis=2))
                   for i in range(cfg.layers)]
        elif self.anchor is not None:
            ctx = self.anchor
        elif H:
            ctx = hist_kv
        else:
            ctx = None
        n_ctx = n_anchor + H * k
        mask_new = streaming_mask(n_ctx, 1, k)
        slot_new = np.asarray([frame_id % cfg.window])
        frame_shape = (1, 1, cfg.latent_h, cfg.latent_w, 12)

        z = (pts[0] * self.stream.normal(frame_shape)).astype(np.float32)
        z0_hat = None
        with T.no_grad():
            for i, s in enumerate(pts):
                v, _ = forward(self.params, cfg, Tensor(z), Tensor(x_n),
                               np.asarray([[s]]), self.text_b, self.mask_b,
                               mode="causal", frame_slots=slot_new,
                               ext_kv=ctx, ext_xkv=self.cross.layers,
                               attn_mask=mask_new)
                self.counters["denoise_forwards"] += 1
                z0_hat = z - np.float32(s) * v.numpy()
                if i + 1 < len(pts):
                    eps = self.stream.normal(frame_shape)
                    z = fm_interpolate(z0_hat, eps, pts[i + 1]).astype(np.float32)

            # clean-frame K/V for the ring, computed at t=0
            _, aux = forward(self.params, cfg, Tensor(z0_hat), Tensor(x_n),
                             np.zeros((1, 1)), self.text_b, self.mask_b,
                             mode="causal", frame_slots=slot_new, ext_kv=ctx,
                             ext_xkv=self.cross.layers, attn_mask=mask_new,
                             capture_kv=True)
        self.counters["capture_passes"] += 1

        self._ring_write(frame_id, z0_hat, x_n, aux["kv"])
        self.frame_count = frame_id
        return codec.decode(z0_hat[0, 0], clamp=True)

    def _ring_write(self, frame_id, z0, x, kv):
        w = self.cfg.window
        if self.anchor is not None and not self.preserve_ref \
                and len(self.frames) >= w - 1:
            # the unanchored reference is the oldest entry: evict it first
            self.anchor = None
            for layer in self.layers:
                layer.anchored = None
        for i, layer in enumerate(self.layers):
            layer.append(frame_id, kv[i][0].copy(), kv[i][1].copy(), w)
        self.frames.append((frame_id, z0, x))
        if len(self.frames) > w:
            self.frames.popleft()

    def set_condition(self, mode, prompt_ids, ref_frame=None):
        """Switch the live condition: rebuild cross cache, keep one frame.

        Validation and cache construction happen before any session state is
        touched, so a failed switch leaves the session unchanged.
        """
        self._check_live()
        state = self._condition_state(mode, prompt_ids, ref_frame)
        self._apply_condition(*state)
        for layer in self.layers:
            layer.truncate_to_newest()
        while len(self.frames) > 1:
            self.frames.popleft()

    def cache_snapshot(self) -> list:
        """Per-layer structural report, read-only.

        cross_digest fingerprints the layer's text (K,V) so a condition
        switch is checkable against a fresh session built the same way.
        """
        out = []
        for layer, (xk, xv) in zip(self.layers, self.cross.layers):
            anchored_len = layer.anchored[0].shape[2] if layer.anchored else 0
            digest = hashlib.blake2s(xk.tobytes() + xv.tobytes()).hexdigest()
            out.append({"anchored": anchored_len, "ring_ids": layer.ids(),
                        "filled": len(layer.ring), "cross_digest": digest})
        return out

    def stats(self) -> dict:
        lat = np.asarray(self.latencies, dtype=np.float64) * 1e3
        return {
            "frames": self.frame_count,
            "mean_ms": float(lat.mean()) if lat.size else 0.0,
            "p95_ms": float(np.percentile(lat, 95)) if lat.size else 0.0,
        }


def make_session(params, cfg, mode, prompt_ids, ref_frame=None, *, seed=0,
                 schedule=None, preserve_ref=True) -> StreamSession:
    return StreamSession(params, cfg, mode, prompt_ids, ref_frame, seed=seed,
                         schedule=schedule, preserve_ref=preserve_ref)


def init_session(ckpt_path, mode, prompt_ids, ref_frame=None, *, seed=0,
                 schedule=None, preserve_ref=True) -> StreamSession:
    cfg, arrays = load_checkpoint(ckpt_path)
    params = arrays_to_params(arrays)
    for p in params.values():
        p.requires_grad = False
    return StreamSession(params, cfg, mode, prompt_ids, ref_frame, seed=seed,
                         schedule=schedule, preserve_ref=preserve_ref)
