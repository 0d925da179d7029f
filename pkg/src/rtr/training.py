"""Teacher training, student initialization, and the ODE sampler.

Stage 1 trains the bidirectional teacher with flow matching: shared t per
clip, velocity target z1 - z0 on the linear interpolation path.

Stage 2 initializes the causal few-step student from teacher weights by
teacher forcing: ground-truth history at t=0, the final frame noised to a
schedule timestep, loss on the final frame's velocity only.

Every random draw in a step comes from a stream named after that step
(seed, "stage.step<i>"), so resuming from a checkpoint at step i reproduces
the uninterrupted run bit-exactly with nothing persisted beyond the step
counter itself.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import codec, synth
from . import tensor as T
from .checkpoint import (
    arrays_to_params,
    load_checkpoint,
    params_to_arrays,
    save_checkpoint,
)
from .conditioning import L_TEXT, build_condition
from .model import ModelConfig, forward, init_params
from .optim import Adam
from .rng import RngStream
from .tensor import NumericError, Tensor

__all__ = [
    "TimestepSchedule",
    "LossLog",
    "ClipStore",
    "DivergenceGuard",
    "fm_interpolate",
    "fm_loss",
    "sample_teacher",
    "train_teacher",
    "train_student_init",
    "load_train_ckpt",
]


@dataclass(frozen=True)
class TimestepSchedule:
    points: tuple

    def __post_init__(self):
        pts = tuple(float(p) for p in self.points)
        if not pts:
            raise ValueError("schedule needs at least one timestep")
        if any(not 0.0 < p <= 1.0 for p in pts):
            raise ValueError(f"schedule points must lie in (0,1]: {pts}")
        if any(a <= b for a, b in zip(pts, pts[1:])):
            raise ValueError(f"schedule must be strictly decreasing: {pts}")
        object.__setattr__(self, "points", pts)

    @classmethod
    def parse(cls, text: str) -> "TimestepSchedule":
        return cls(tuple(float(p) for p in text.split(",") if p.strip()))

    @property
    def k(self) -> int:
        return len(self.points)


DEFAULT_SCHEDULE = TimestepSchedule((1.0, 0.5))


class LossLog:
    """Append-only CSV {step, loss_name, value}."""

    def __init__(self, path):
        self.path = path
        if path is not None and not os.path.exists(path):
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("step,loss_name,value\n")

    def log(self, step: int, name: str, value: float):
        if self.path is None:
            return
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"{step},{name},{value:.10g}\n")


class DivergenceGuard:
    """Aborts when loss exceeds 10x the initial loss for 100 straight steps."""

    def __init__(self, factor=10.0, patience=100):
        self.factor = factor
        self.patience = patience
        self.initial = None
        self.streak = 0

    def check(self, step: int, value: float):
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {step}")
        if self.initial is None:
            self.initial = value
            return
        if value > self.factor * self.initial:
            self.streak += 1
            if self.streak >= self.patience:
                raise RuntimeError(
                    f"training diverged: loss {value:.4g} > {self.factor}x initial "
                    f"{self.initial:.4g} for {self.patience} consecutive steps "
                    f"(at step {step})"
                )
        else:
            self.streak = 0


class ClipStore:
    """Lazy cache of source/target latent clips for a dataset."""

    def __init__(self, root, samples: list[synth.SampleSpec]):
        self.root = root
        self.samples = samples
        self._src: dict[str, np.ndarray] = {}
        self._pix: dict[str, np.ndarray] = {}
        self._tgt: dict[tuple, np.ndarray] = {}
        self.by_mode = {"tv2v": [], "rv2v": []}
        for i, s in enumerate(samples):
            self.by_mode[s.mode].append(i)

    def pixels(self, idx: int) -> np.ndarray:
        s = self.samples[idx]
        if s.video_file not in self._pix:
            clip, _ = codec.load_video(os.path.join(self.root, s.video_file))
            self._pix[s.video_file] = clip
        return self._pix[s.video_file]

    def source_latents(self, idx: int) -> np.ndarray:
        s = self.samples[idx]
        if s.video_file not in self._src:
            self._src[s.video_file] = codec.encode(self.pixels(idx))
        return self._src[s.video_file]

    def target_pixels(self, idx: int) -> np.ndarray:
        s = self.samples[idx]
        return synth.apply_style(s.style, self.pixels(idx))

    def target_latents(self, idx: int) -> np.ndarray:
        s = self.samples[idx]
        key = (s.video_file, s.style.style_id)
        if key not in self._tgt:
            self._tgt[key] = codec.encode(self.target_pixels(idx))
        return self._tgt[key]

    def n_frames(self, idx: int) -> int:
        return self.pixels(idx).shape[0]


# ----------------------------------------------------------- flow matching

def fm_interpolate(z0, z1, t):
    """z_t = (1-t) z0 + t z1. Tensor path when z0 is a Tensor, numpy otherwise.

    t: scalar or per-leading-dims array (e.g. [B,N] against [B,N,h,w,c]).
    """
    if isinstance(z0, Tensor):
        tt = np.asarray(t, dtype=np.float64)
        if tt.ndim == 0:
            a = T.mul(z0, float(1.0 - tt))
            b = T.mul(z1, float(tt))
        else:
            dt = z0.dtype
            a = T.scale_leading(z0, Tensor((1.0 - tt), dtype=dt))
            b = T.scale_leading(z1, Tensor(tt, dtype=dt))
        return T.add(a, b)
    t_arr = np.asarray(t, dtype=np.float64)
    shaped = t_arr.reshape(t_arr.shape + (1,) * (np.ndim(z0) - t_arr.ndim))
    return ((1.0 - shaped) * z0 + shaped * z1).astype(np.asarray(z0).dtype)


def fm_loss(v: Tensor, z0: Tensor, z1: Tensor) -> Tensor:
    """Mean squared error between v and the velocity target z1 - z0."""
    diff = T.sub(v, T.sub(z1, z0))
    return T.mean_all(T.mul(diff, diff))


def sample_teacher(velocity_fn, z1: np.ndarray, n_euler: int) -> np.ndarray:
    """Euler-integrate dz/dt = v from t=1 (z1) down to t=0.

    velocity_fn(z, t_scalar) -> velocity array shaped like z.
    """
    if n_euler < 1:
        raise ValueError("need at least one Euler step")
    z = np.array(z1, copy=True)
    dt = 1.0 / n_euler
    for i in range(n_euler):
        t_i = 1.0 - i * dt
        z = z - dt * velocity_fn(z, t_i)
    return z


# -------------------------------------------------------------- batch prep

def batch_condition(store: ClipStore, idxs, params, dtype="f32"):
    """Per-sample ConditionSets stacked into batch tensors.

    Returns (text [B,L,D], text_mask [B,L], ref_tokens [B,k,D] or None).
    All samples in a batch share one mode.
    """
    conds = []
    for i in idxs:
        s = store.samples[i]
        ref = store.target_pixels(i)[s.ref_frame] if s.mode == "rv2v" else None
        conds.append(build_condition(s.mode, list(s.prompt_ids), params, ref_frame=ref))
    B = len(conds)
    D = conds[0].text.shape[1]
    text = T.reshape(T.concat([c.text for c in conds], axis=0), (B, L_TEXT, D))
    mask = np.stack([c.text_mask for c in conds])
    ref_tokens = None
    if conds[0].mode == "rv2v":
        k = conds[0].ref_tokens.shape[0]
        ref_tokens = T.reshape(
            T.concat([c.ref_tokens for c in conds], axis=0), (B, k, D)
        )
    return text, mask, ref_tokens


def _draw_batch_idxs(store: ClipStore, st: RngStream, batch_size: int):
    """One mode per batch: the first draw picks the mode, the rest fill from
    that mode's pool."""
    first = int(st.integers(len(store.samples), ()))
    mode = store.samples[first].mode
    pool = store.by_mode[mode]
    rest = [pool[int(j)] for j in st.integers(len(pool), (batch_size - 1,))]
    return [first] + rest, mode


# ------------------------------------------------------------------ stages

def _lr_at(step, steps, peak):
    """Linear warmup into cosine decay, floored at peak/20.

    Pure function of the step index, so a resumed run follows the same
    schedule as an uninterrupted one.
    """
    warm = max(1, steps // 50)
    if step < warm:
        return peak * (step + 1) / warm
    floor = peak / 20.0
    prog = (step - warm) / max(1, steps - warm)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * prog))


def _train_common(params, cfg, *, steps, lr, seed, stage, out_ckpt,
                  log: LossLog, loss_name, step_fn, start_step=0,
                  opt_state=None, save_every=None, stop_after=None):
    opt = Adam(params, lr=lr)
    if opt_state is not None:
        opt.load_state_arrays(opt_state)
    guard = DivergenceGuard()
    end = steps if stop_after is None else min(steps, start_step + stop_after)
    for step in range(start_step, end):
        # lr follows the full plan length, so an interrupted run resumes on
        # the same schedule it would have followed uninterrupted
        opt.lr = _lr_at(step, steps, lr)
        st = RngStream(seed, f"{stage}.step{step}")
        opt.zero_grad()
        with T.Tape() as tape:
            loss = step_fn(st, step)
        T.backward(loss, tape, ensure=params.values())
        value = loss.item()
        guard.check(step, value)
        opt.step()
        log.log(step, loss_name, value)
        if save_every and (step + 1) % save_every == 0 and out_ckpt:
            _save_train_ckpt(out_ckpt, cfg, params, opt, stage, step + 1, steps)
    if out_ckpt:
        _save_train_ckpt(out_ckpt, cfg, params, opt, stage, end, steps)
    return params, opt


def _save_train_ckpt(path, cfg, params, opt, stage, step, steps):
    arrays = params_to_arrays(params)
    arrays.update(opt.state_arrays())
    arrays["meta.stage"] = np.asarray(STAGE_IDS[stage], dtype=np.int64)
    arrays["meta.step"] = np.asarray(step, dtype=np.int64)
    arrays["meta.steps_total"] = np.asarray(steps, dtype=np.int64)
    save_checkpoint(path, cfg, arrays)


STAGE_IDS = {"teacher": 1, "student": 2, "post": 3}


def load_train_ckpt(path):
    """Load (cfg, params, opt_arrays, meta) from a training checkpoint.

    params come back requires_grad=True; opt_arrays feed Adam.load_state_arrays;
    meta has stage/step/steps_total when present.
    """
    cfg, arrays = load_checkpoint(path)
    params = arrays_to_params(arrays)
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("opt.")}
    meta = {}
    for key in ("stage", "step", "steps_total"):
        if f"meta.{key}" in arrays:
            meta[key] = int(arrays[f"meta.{key}"])
    return cfg, params, opt_arrays or None, meta


def train_teacher(dataset_root, manifest, cfg: ModelConfig, *, steps, lr=2e-4,
                  batch_size=2, seed=0, out_ckpt=None, log_path=None,
                  params=None, start_step=0, opt_state=None, save_every=None,
                  stop_after=None, t_min=0.1):
    """Stage 1: bidirectional flow matching, shared t per clip.

    t is drawn from [t_min, 1]: recovering the velocity target needs an
    implicit divide by t, so samples below t_min buy conditioning trouble
    instead of signal. Inference never queries the teacher there.
    """
    samples = synth.load_manifest(manifest)
    store = ClipStore(dataset_root, samples)
    if params is None:
        params = init_params(cfg, seed)
    log = LossLog(log_path)
    W = cfg.window

    def step_fn(st: RngStream, step: int):
        idxs, _ = _draw_batch_idxs(store, st, batch_size)
        rot = int(st.integers(W, ()))
        slots = (rot + np.arange(W)) % cfg.window  # expose every slot rotation
        z0_np, x_np = [], []
        for i in idxs:
            n_total = store.n_frames(i)
            w0 = int(st.integers(n_total - W + 1, ()))
            z0_np.append(store.target_latents(i)[w0:w0 + W])
            x_np.append(store.source_latents(i)[w0:w0 + W])
        z0 = Tensor(np.stack(z0_np))
        x = Tensor(np.stack(x_np))
        t_clip = t_min + (1.0 - t_min) * st.uniform((batch_size,))
        t = np.repeat(t_clip[:, None], W, axis=1)  # shared t per clip
        z1 = Tensor(st.normal(z0.shape, dtype=np.float32))
        text, mask, ref_tokens = batch_condition(store, idxs, params)
        z_t = fm_interpolate(z0, z1, t)
        v, _ = forward(params, cfg, z_t, x, t, text, mask, ref_tokens=ref_tokens,
                       mode="bidirectional", frame_slots=slots)
        return fm_loss(v, z0, z1)

    return _train_common(
        params, cfg, steps=steps, lr=lr, seed=seed, stage="teacher",
        out_ckpt=out_ckpt, log=log, loss_name="fm_loss", step_fn=step_fn,
        start_step=start_step, opt_state=opt_state, save_every=save_every,
        stop_after=stop_after,
    )


def train_student_init(dataset_root, manifest, cfg: ModelConfig, teacher_params, *,
                       steps, schedule: TimestepSchedule = DEFAULT_SCHEDULE,
                       lr=2e-4, batch_size=2, seed=0, out_ckpt=None, log_path=None,
                       params=None, start_step=0, opt_state=None, save_every=None,
                       stop_after=None):
    """Stage 2: causal student from teacher weights, teacher-forced.

    Per sample: window length n ~ U{1..W}, ground-truth history at t=0, the
    final frame noised to a schedule timestep drawn uniformly; loss on the
    final frame only.
    """
    samples = synth.load_manifest(manifest)
    store = ClipStore(dataset_root, samples)
    if params is None:
        params = {k: Tensor(p.data.copy(), requires_grad=True) for k, p in teacher_params.items()}
    log = LossLog(log_path)
    W = cfg.window

    def step_fn(st: RngStream, step: int):
        idxs, _ = _draw_batch_idxs(store, st, batch_size)
        n = int(st.integers(W, ())) + 1  # frames in this window, shared batch-wide
        rot = int(st.integers(W, ()))
        slots = (rot + np.arange(n)) % cfg.window
        z0_np, x_np = [], []
        for i in idxs:
            n_total = store.n_frames(i)
            w0 = int(st.integers(n_total - n + 1, ()))
            z0_np.append(store.target_latents(i)[w0:w0 + n])
            x_np.append(store.source_latents(i)[w0:w0 + n])
        z0 = Tensor(np.stack(z0_np))
        x = Tensor(np.stack(x_np))
        s_pick = [schedule.points[int(j)] for j in st.integers(schedule.k, (batch_size,))]
        t = np.zeros((batch_size, n))
        t[:, -1] = s_pick  # clean history, noised final frame
        noise_last = Tensor(st.normal((batch_size, 1) + z0.shape[2:], dtype=np.float32))
        z_last = fm_interpolate(T.narrow(z0, 1, n - 1, 1), noise_last, np.asarray(s_pick)[:, None])
        if n > 1:
            z_t = T.concat([T.narrow(z0, 1, 0, n - 1), z_last], axis=1)
        else:
            z_t = z_last
        text, mask, ref_tokens = batch_condition(store, idxs, params)
        v, _ = forward(params, cfg, z_t, x, t, text, mask, ref_tokens=ref_tokens,
                       mode="causal", frame_slots=slots)
        v_last = T.narrow(v, 1, n - 1, 1)
        return fm_loss(v_last, T.narrow(z0, 1, n - 1, 1), noise_last)

    return _train_common(
        params, cfg, steps=steps, lr=lr, seed=seed, stage="student",
        out_ckpt=out_ckpt, log=log, loss_name="student_fm_loss", step_fn=step_fn,
        start_step=start_step, opt_state=opt_state, save_every=save_every,
        stop_after=stop_after,
    )
