"""Procedural training data with oracle restyle targets.

Source clips are smooth gradient backgrounds with 1-3 soft-edged moving
shapes, fully determined by seed. Targets come from deterministic pixel
transforms (the "styles"); because target == T(source) exactly, style
classification and PSNR against targets are oracle-checkable.

Every default transform is Lipschitz on [0,1]^3 so nearby sources map to
nearby targets (posterize is implemented for completeness but stays out of
the default registry because its jumps violate that bound).

Dataset on disk: one RTRV file per source clip plus a line-oriented
manifest {file, style name, mode, ref frame index, prompt token names...}.
Targets are recomputed from the named style on load, never stored.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .conditioning import RV2V_INSTRUCTION_ID, Vocab, default_vocab
from .rng import RngStream

__all__ = [
    "StyleSpec",
    "SampleSpec",
    "default_styles",
    "style_by_name",
    "apply_style",
    "gen_video",
    "make_dataset",
    "load_manifest",
]


@dataclass(frozen=True)
class StyleSpec:
    style_id: int
    name: str
    kind: str  # color_matrix | gamma | gray_edge | permutation | posterize
    params: tuple = field(default_factory=tuple)


def default_styles() -> list[StyleSpec]:
    m_sepia = ((0.393, 0.769, 0.189), (0.349, 0.686, 0.168), (0.272, 0.534, 0.131))
    m_neg = ((-1.0, 0.0, 0.0), (0.0, -1.0, 0.0), (0.0, 0.0, -1.0))
    m_cool = ((0.85, 0.0, 0.0), (0.0, 0.85, 0.0), (0.0, 0.0, 0.85))
    return [
        StyleSpec(0, "sepia", "color_matrix", (m_sepia, (0.0, 0.0, 0.0))),
        StyleSpec(1, "negative", "color_matrix", (m_neg, (1.0, 1.0, 1.0))),
        StyleSpec(2, "perm_gbr", "permutation", ((1, 2, 0),)),
        StyleSpec(3, "perm_brg", "permutation", ((2, 0, 1),)),
        StyleSpec(4, "gamma_warm", "gamma", ((1.0, 1.2, 1.6),)),
        StyleSpec(5, "gamma_cool", "gamma", ((1.6, 1.2, 1.0),)),
        StyleSpec(6, "ink", "gray_edge", (0.5,)),
        StyleSpec(7, "cool_shift", "color_matrix", (m_cool, (0.0, 0.05, 0.15))),
    ]


def style_by_name(name: str, styles=None) -> StyleSpec:
    for s in styles or default_styles():
        if s.name == name:
            return s
    raise KeyError(f"unknown style {name!r}")


def apply_style(style: StyleSpec, clip: np.ndarray) -> np.ndarray:
    """Per-pixel transform of [..., 3] pixels, clamped to [0,1]."""
    x = np.asarray(clip, dtype=np.float32)
    if style.kind == "color_matrix":
        mat, bias = style.params
        out = x @ np.asarray(mat, dtype=np.float32).T + np.asarray(bias, dtype=np.float32)
    elif style.kind == "permutation":
        (perm,) = style.params
        out = x[..., list(perm)]
    elif style.kind == "gamma":
        (gammas,) = style.params
        out = x ** np.asarray(gammas, dtype=np.float32)
    elif style.kind == "gray_edge":
        (boost,) = style.params
        gray = x @ np.asarray([0.299, 0.587, 0.114], dtype=np.float32)
        gy = np.abs(np.diff(gray, axis=-2, prepend=gray[..., :1, :]))
        gx = np.abs(np.diff(gray, axis=-1, prepend=gray[..., :, :1]))
        lifted = gray + boost * (gx + gy)
        out = np.repeat(lifted[..., None], 3, axis=-1)
    elif style.kind == "posterize":
        (levels,) = style.params
        out = np.floor(x * levels) / (levels - 1)
    else:
        raise KeyError(f"unknown style kind {style.kind!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ------------------------------------------------------------ source clips

def _shape_alpha(kind, cx, cy, size, yy, xx):
    if kind == 0:  # circle
        d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2) - size
    else:  # axis-aligned square
        d = np.maximum(np.abs(xx - cx), np.abs(yy - cy)) - size
    return np.clip(0.5 - d, 0.0, 1.0)  # one-pixel soft border


def gen_video(seed: int, n_frames: int = 16, size: int = 32) -> np.ndarray:
    """[N, size, size, 3] f32 clip, fully determined by seed."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    st = RngStream(seed, "synth.video")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)

    base = st.uniform((3,)) * 0.4 + 0.2
    slope_x = (st.uniform((3,)) - 0.5) * 0.4 / size
    slope_y = (st.uniform((3,)) - 0.5) * 0.4 / size
    bg = base + slope_x * xx[..., None] + slope_y * yy[..., None]

    n_shapes = int(st.integers(3, ())) + 1
    shapes = []
    for _ in range(n_shapes):
        shapes.append(
            dict(
                kind=int(st.integers(2, ())),
                p0=st.uniform((2,)) * size,
                vel=(st.uniform((2,)) - 0.5) * 1.6,
                amp=st.uniform((2,)) * 2.0,
                freq=st.uniform((2,)) * 0.5 + 0.1,
                phase=st.uniform((2,)) * 2 * np.pi,
                radius=st.uniform(()) * (size / 6) + size / 10,
                color=st.uniform((3,)) * 0.8 + 0.2,
            )
        )

    frames = np.empty((n_frames, size, size, 3), dtype=np.float32)
    for n in range(n_frames):
        img = bg.copy()
        for s in shapes:
            px = s["p0"][0] + s["vel"][0] * n + s["amp"][0] * np.sin(s["freq"][0] * n + s["phase"][0])
            py = s["p0"][1] + s["vel"][1] * n + s["amp"][1] * np.sin(s["freq"][1] * n + s["phase"][1])
            px %= size
            py %= size
            a = _shape_alpha(s["kind"], px, py, s["radius"], yy, xx)[..., None]
            img = img * (1 - a) + s["color"] * a
        frames[n] = np.clip(img, 0.0, 1.0)
    return frames


# ---------------------------------------------------------------- datasets

@dataclass(frozen=True)
class SampleSpec:
    video_file: str
    style: StyleSpec
    mode: str  # tv2v | rv2v
    ref_frame: int  # -1 for tv2v
    prompt_ids: tuple


def _style_perm(st: RngStream, n: int) -> list[int]:
    """Fisher-Yates permutation of range(n) driven by the stream."""
    perm = list(range(n))
    for j in range(n - 1, 0, -1):
        k = int(st.integers(j + 1, ()))
        perm[j], perm[k] = perm[k], perm[j]
    return perm


def make_dataset(out_dir, n_samples: int, mix_tv2v: float, seed: int,
                 n_frames: int = 16, size: int = 32, vocab: Vocab | None = None,
                 clip_reuse: int = 4) -> str:
    """Write clips + manifest; returns the manifest path.

    Runs of clip_reuse consecutive samples share one video, each appearance
    under a different style for its mode: if every video appeared under a
    single style, content alone would determine the transform and the
    conditioning channels would carry no training signal.

    mix_tv2v is realized with a fractional accumulator so counts are exact
    (mix 0.5 over 1000 samples -> 500/500, deterministically).
    """
    if not 0.0 <= mix_tv2v <= 1.0:
        raise ValueError("mix must be in [0,1]")
    if clip_reuse < 1:
        raise ValueError("clip_reuse must be >= 1")
    vocab = vocab or default_vocab()
    styles = default_styles()
    os.makedirs(os.path.join(out_dir, "videos"), exist_ok=True)
    lines = []
    acc = 0.0
    perms: dict[int, list[int]] = {}
    mode_counts: dict[tuple[int, str], int] = {}
    for i in range(n_samples):
        vi = i // clip_reuse
        rel = os.path.join("videos", f"clip_{vi:05d}.rtrv")
        if vi not in perms:
            vst = RngStream(seed, f"synth.video.{vi}")
            clip_seed = int(vst.integers(2**31, ()))
            codec.save_video(os.path.join(out_dir, rel),
                             gen_video(clip_seed, n_frames, size))
            perms[vi] = _style_perm(vst, len(styles))
        acc += mix_tv2v
        if acc >= 1.0 - 1e-9:
            acc -= 1.0
            mode = "tv2v"
            ref_frame = -1
        else:
            mode = "rv2v"
            st = RngStream(seed, f"synth.sample.{i}")
            ref_frame = int(st.integers(n_frames, ()))
        j = mode_counts.get((vi, mode), 0)
        mode_counts[(vi, mode)] = j + 1
        style = styles[perms[vi][j % len(styles)]]
        if mode == "tv2v":
            prompt_names = [style.name]
        else:
            prompt_names = [vocab.name(RV2V_INSTRUCTION_ID)]
        lines.append(f"{rel} {style.name} {mode} {ref_frame} {' '.join(prompt_names)}")
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


def load_manifest(manifest_path, vocab: Vocab | None = None) -> list[SampleSpec]:
    vocab = vocab or default_vocab()
    samples = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 5:
                raise ValueError(f"manifest line {ln}: expected 5+ fields, got {len(parts)}")
            rel, style_name, mode, ref_s = parts[:4]
            if mode not in ("tv2v", "rv2v"):
                raise ValueError(f"manifest line {ln}: bad mode {mode!r}")
            samples.append(
                SampleSpec(
                    video_file=rel,
                    style=style_by_name(style_name),
                    mode=mode,
                    ref_frame=int(ref_s),
                    prompt_ids=tuple(vocab.id(w) for w in parts[4:]),
                )
            )
    return samples
