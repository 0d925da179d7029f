"""Evaluation harness: style fidelity, temporal consistency, long-rollout
drift, and latency.

Style fidelity is oracle-checkable by construction: training targets are
deterministic pixel transforms of the source, so nearest-transform
classification replaces learned similarity scores and is exact on clean
targets. Drift runs the reference-preserving ablation as a paired
experiment: both cache configurations see identical sources and identical
RNG states, so the comparison isolates the cache policy.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, fields

import numpy as np

from .synth import StyleSpec, apply_style

__all__ = [
    "EvalReport",
    "psnr",
    "style_match",
    "frame_consistency",
    "drift_eval",
    "latency_eval",
    "clip_eval",
    "save_curves_csv",
]


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give inf."""
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def style_match(output: np.ndarray, source: np.ndarray, styles: list[StyleSpec],
                true_style_id: int | None = None):
    """Nearest-transform classification, per frame.

    predicted[f] = argmin over styles of MSE(output[f], T_s(source[f])),
    ties broken by lowest style_id. Returns (predicted ids, accuracy) with
    accuracy None when no truth is given.
    """
    out = np.asarray(output, np.float64)
    src = np.asarray(source, np.float64)
    if out.shape != src.shape:
        raise ValueError(f"clip shapes differ: {out.shape} vs {src.shape}")
    ordered = sorted(styles, key=lambda s: s.style_id)
    # errs[s, f]: argmin over axis 0 returns the first (lowest-id) minimum
    errs = np.stack([
        np.mean((out - apply_style(s, src)) ** 2, axis=(1, 2, 3))
        for s in ordered
    ])
    pick = np.argmin(errs, axis=0)
    pred = np.asarray([ordered[i].style_id for i in pick], dtype=np.int64)
    acc = None
    if true_style_id is not None:
        acc = float(np.mean(pred == true_style_id))
    return pred, acc


def frame_consistency(clip: np.ndarray) -> float:
    """Mean cosine similarity of consecutive 8x block-downsampled frames."""
    clip = np.asarray(clip, np.float64)
    n = clip.shape[0]
    if n < 2:
        raise ValueError("frame_consistency needs at least 2 frames")
    h, w = clip.shape[1], clip.shape[2]
    if h % 8 or w % 8:
        raise ValueError(f"frame dims {h}x{w} not divisible by 8")
    small = clip.reshape(n, h // 8, 8, w // 8, 8, -1).mean(axis=(2, 4))
    flat = small.reshape(n, -1)
    sims = []
    for i in range(n - 1):
        a, b = flat[i], flat[i + 1]
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 and nb == 0.0:
            sims.append(1.0)
        elif na == 0.0 or nb == 0.0:
            sims.append(0.0)
        else:
            sims.append(float(a @ b / (na * nb)))
    return float(np.mean(sims))


def drift_eval(session_factory, sources: np.ndarray, ref_style: StyleSpec,
               last: int = 50) -> dict:
    """Paired reference-preservation ablation over one source stream.

    session_factory(preserve_ref: bool) -> session; both configurations
    must come back identically seeded so the run is a paired experiment.
    Per frame the drift is MSE(output, T_ref(source)); the summary is the
    mean over the final `last` frames, after eviction has set in.
    """
    targets = apply_style(ref_style, np.asarray(sources, np.float32))
    curves = {}
    for key, preserve in (("on", True), ("off", False)):
        sess = session_factory(preserve)
        curve = []
        for f, tgt in zip(sources, targets):
            out = sess.process_frame(f)
            curve.append(float(np.mean((np.asarray(out, np.float64) - tgt) ** 2)))
        curves[key] = np.asarray(curve)
    return {
        "curve_on": curves["on"],
        "curve_off": curves["off"],
        "last_on": float(curves["on"][-last:].mean()),
        "last_off": float(curves["off"][-last:].mean()),
    }


def latency_eval(session, sources: np.ndarray, warmup: int = 5,
                 timer=time.perf_counter) -> dict:
    """Per-frame wall time: mean, p95, and least-squares slope vs index.

    The first `warmup` frames are measured but excluded from every
    statistic.
    """
    n = len(sources)
    if n <= warmup:
        raise ValueError(f"need more than {warmup} frames, got {n}")
    times = []
    for f in sources:
        t0 = timer()
        session.process_frame(f)
        times.append((timer() - t0) * 1e3)
    kept = np.asarray(times[warmup:], np.float64)
    idx = np.arange(kept.size, dtype=np.float64)
    slope = float(np.polyfit(idx, kept, 1)[0]) if kept.size > 1 else 0.0
    return {
        "mean_ms": float(kept.mean()),
        "p95_ms": float(np.percentile(kept, 95)),
        "slope_ms_per_frame": slope,
        "n": int(kept.size),
    }


def clip_eval(output: np.ndarray, source: np.ndarray, style: StyleSpec,
              styles: list[StyleSpec]) -> dict:
    """Per-clip bundle: style accuracy, PSNR vs oracle target, the
    copy-source baseline PSNR, and temporal consistency."""
    target = apply_style(style, np.asarray(source, np.float32))
    _, acc = style_match(output, source, styles, true_style_id=style.style_id)
    return {
        "style_accuracy": acc,
        "psnr_db": psnr(output, target),
        "baseline_psnr_db": psnr(source, target),
        "frame_consistency": frame_consistency(output),
    }


@dataclass
class EvalReport:
    """Aggregate metrics; serialized as line-oriented key=value text."""

    style_match_accuracy: float
    n_cases: int
    mean_target_psnr_db: float
    baseline_psnr_db: float
    frame_consistency: float
    drift_last50_on: float
    drift_last50_off: float
    latency_mean_ms: float
    latency_p95_ms: float

    def to_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = dict(line.split("=", 1) for line in text.strip().splitlines())
        args = {}
        for f in fields(cls):
            raw = kv[f.name]
            args[f.name] = int(raw) if f.type == "int" else float(raw)
        return cls(**args)


def save_curves_csv(path, curves: dict):
    """Write named per-frame curves as CSV columns (frame index first)."""
    names = sorted(curves)
    length = len(next(iter(curves.values())))
    if any(len(curves[n]) != length for n in names):
        raise ValueError("curves differ in length")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["frame"] + names)
        for i in range(length):
            w.writerow([i] + [repr(float(curves[n][i])) for n in names])
