"""Pixel <-> latent codec and the raw video container.

The latent space is a single-level orthonormal 2x2 Haar transform applied
per color channel: four subbands x three channels = 12 latent channels at
half resolution. It is exactly invertible (up to f32 roundoff) and energy
preserving, so every downstream claim about latents can be checked in pixel
space.

Video container: header {magic "RTRV", version u16, H u16, W u16, N u32,
fps u8}, little-endian, followed by N frames of H*W*3 f32.
"""

from __future__ import annotations

import struct

import numpy as np

from .tensor import ShapeError

__all__ = [
    "LATENT_CHANNELS",
    "encode",
    "decode",
    "save_video",
    "load_video",
]

LATENT_CHANNELS = 12

_HEADER = struct.Struct("<4sHHHIB")
_MAGIC = b"RTRV"
_VERSION = 1


def encode(frame: np.ndarray) -> np.ndarray:
    """[..., H, W, 3] pixels -> [..., H/2, W/2, 12] latents.

    Subband channel order: [LL_r, LL_g, LL_b, LH_r, LH_g, LH_b,
    HL_r, HL_g, HL_b, HH_r, HH_g, HH_b].
    """
    x = np.asarray(frame, dtype=np.float32)
    if x.ndim < 3 or x.shape[-1] != 3:
        raise ShapeError(f"encode: expected [..., H, W, 3], got {x.shape}")
    H, W = x.shape[-3], x.shape[-2]
    if H % 4 or W % 4:
        raise ShapeError(f"encode: H and W must be divisible by 4, got {H}x{W}")
    a = x[..., 0::2, 0::2, :]
    b = x[..., 0::2, 1::2, :]
    c = x[..., 1::2, 0::2, :]
    d = x[..., 1::2, 1::2, :]
    ll = (a + b + c + d) * 0.5
    lh = (a + b - c - d) * 0.5
    hl = (a - b + c - d) * 0.5
    hh = (a - b - c + d) * 0.5
    return np.ascontiguousarray(np.concatenate([ll, lh, hl, hh], axis=-1))


def decode(latent: np.ndarray, clamp: bool = True) -> np.ndarray:
    """[..., h, w, 12] latents -> [..., 2h, 2w, 3] pixels.

    clamp=True clips to [0,1] for display; training targets use clamp=False
    so the inverse stays exact.
    """
    z = np.asarray(latent, dtype=np.float32)
    if z.ndim < 3 or z.shape[-1] != LATENT_CHANNELS:
        raise ShapeError(f"decode: expected [..., h, w, 12], got {z.shape}")
    ll, lh, hl, hh = (z[..., i * 3:(i + 1) * 3] for i in range(4))
    a = (ll + lh + hl + hh) * 0.5
    b = (ll + lh - hl - hh) * 0.5
    c = (ll - lh + hl - hh) * 0.5
    d = (ll - lh - hl + hh) * 0.5
    h, w = z.shape[-3], z.shape[-2]
    out = np.empty(z.shape[:-3] + (2 * h, 2 * w, 3), dtype=np.float32)
    out[..., 0::2, 0::2, :] = a
    out[..., 0::2, 1::2, :] = b
    out[..., 1::2, 0::2, :] = c
    out[..., 1::2, 1::2, :] = d
    if clamp:
        np.clip(out, 0.0, 1.0, out=out)
    return out


def save_video(path, frames: np.ndarray, fps: int = 16) -> None:
    """frames: [N, H, W, 3] f32. Values are stored as-is."""
    f = np.ascontiguousarray(frames, dtype=np.float32)
    if f.ndim != 4 or f.shape[-1] != 3:
        raise ShapeError(f"save_video: expected [N, H, W, 3], got {f.shape}")
    n, h, w, _ = f.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, h, w, n, fps))
        fh.write(f.astype("<f4").tobytes())


def load_video(path):
    """Returns (frames [N, H, W, 3] f32, fps)."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError("video file truncated in header")
        magic, version, h, w, n, fps = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r}, want {_MAGIC!r}")
        if version != _VERSION:
            raise ValueError(f"unsupported video version {version}")
        body = fh.read(n * h * w * 3 * 4)
    if len(body) != n * h * w * 3 * 4:
        raise ValueError("video file truncated in frame data")
    frames = np.frombuffer(body, dtype="<f4").reshape(n, h, w, 3)
    return np.ascontiguousarray(frames), int(fps)
