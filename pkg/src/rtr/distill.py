"""Few-step distillation: self-forcing rollouts, distribution matching, GAN.

Stage 3 post-training. Each outer step: roll the causal student out over its
own generations, take one generator step on the distribution-matching
surrogate plus a small adversarial term, refresh the generator-score network
five times, then one discriminator step. The data-score network stays frozen
throughout; its parameter hash is the witness.

The distribution-matching gradient is computed in predicted-clean-sample
space: both score networks see the same diffused rollout, x_hat = z_t - t*v,
and the generator is pushed along (x_hat_gen - x_hat_data), normalized
per sample by mean|x_hat_data - z0_hat| + eps. When the two networks carry
identical weights the direction is exactly zero.
"""

from __future__ import annotations

import hashlib
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from . import synth
from . import tensor as T
from .checkpoint import (
    arrays_to_params,
    load_checkpoint,
    params_to_arrays,
    save_checkpoint,
)
from .model import ModelConfig, forward
from .optim import Adam
from .rng import RngStream
from .tensor import Tensor
from .training import (
    DEFAULT_SCHEDULE,
    ClipStore,
    DivergenceGuard,
    LossLog,
    TimestepSchedule,
    _draw_batch_idxs,
    batch_condition,
    fm_interpolate,
    fm_loss,
)

__all__ = [
    "ScorePair",
    "make_score_pair",
    "param_hash",
    "few_step_denoise_frame",
    "self_rollout",
    "dmd_generator_grad",
    "update_gen_score",
    "init_disc_head",
    "disc_logit",
    "gan_losses",
    "post_train",
    "load_post_ckpt",
]

DMD_EPS = 1e-8
DMD_NORM_FLOOR = 1e-4
LOGIT_CLAMP = 30.0


def param_hash(params: dict) -> str:
    """Order-independent digest of a parameter dict's raw bytes."""
    h = hashlib.blake2s()
    for name in sorted(params):
        h.update(name.encode())
        arr = params[name].data if isinstance(params[name], Tensor) else params[name]
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@dataclass
class ScorePair:
    """Frozen data-score network and trainable generator-score network."""

    data_params: dict
    gen_params: dict
    cfg: ModelConfig
    opt: Adam
    data_hash: str = ""
    gen_updates: int = 0

    def __post_init__(self):
        if not self.data_hash:
            self.data_hash = param_hash(self.data_params)

    def check_frozen(self):
        if param_hash(self.data_params) != self.data_hash:
            raise RuntimeError("data-score network changed during post-training")


def make_score_pair(teacher_params: dict, cfg: ModelConfig, lr: float) -> ScorePair:
    data = {k: Tensor(p.data.copy(), requires_grad=False) for k, p in teacher_params.items()}
    gen = {k: Tensor(p.data.copy(), requires_grad=True) for k, p in teacher_params.items()}
    return ScorePair(data, gen, cfg, Adam(gen, lr=lr))


# ------------------------------------------------------------- generation

def few_step_denoise_frame(params, cfg, schedule: TimestepSchedule, hist,
                           x_win, text, text_mask, ref_tokens, slots,
                           noise_fn, counters=None):
    """Generate one frame given detached clean history.

    hist: [B,H,h,w,12] numpy, H >= 0. x_win: [B,H+1,...] source latents up to
    and including the new frame. noise_fn(i, shape) -> numpy draw for the
    initial latent (i=0) and each renoising (i >= 1).

    Returns z0_hat Tensor [B,1,h,w,12]. Gradient flows through the final
    denoise step only; intermediate steps run untracked.
    """
    pts = schedule.points
    K = len(pts)
    B = x_win.shape[0]
    H = hist.shape[1]
    frame_shape = (B, 1, cfg.latent_h, cfg.latent_w, 12)
    x_t = x_win if isinstance(x_win, Tensor) else Tensor(np.asarray(x_win, dtype=np.float32))
    # starting point at s_1 per the interpolation path with a zero clean prior
    z = Tensor((pts[0] * noise_fn(0, frame_shape)).astype(np.float32, copy=False))
    t_row = np.zeros((B, H + 1))
    hist_t = Tensor(np.asarray(hist, dtype=np.float32)) if H else None
    z0_hat = None
    for i, s in enumerate(pts):
        t_row[:, -1] = s
        last = i == K - 1
        with (nullcontext() if last else T.no_grad()):
            z_full = T.concat([hist_t, z], axis=1) if H else z
            v, _ = forward(params, cfg, z_full, x_t, t_row, text, text_mask,
                           ref_tokens=ref_tokens, mode="causal",
                           frame_slots=slots)
            if counters is not None:
                counters["gen_forwards"] = counters.get("gen_forwards", 0) + 1
            v_last = T.narrow(v, 1, H, 1)
            z0_hat = T.sub(z, T.mul(v_last, float(s)))
            if not last:
                eps = noise_fn(i + 1, frame_shape)
                z = Tensor(fm_interpolate(z0_hat.numpy(), eps, pts[i + 1]))
    return z0_hat


def self_rollout(params, cfg, schedule, x, text, text_mask, ref_tokens, slots,
                 stream: RngStream, counters=None):
    """Autoregressive rollout: frame n conditions on its own z0_hat^{<n}.

    x: [B,N,...] numpy source latents, N <= window. Returns a list of N
    Tensors [B,1,...], each carrying gradient through its own final denoise
    step (history context detached).
    """
    x = np.asarray(x, dtype=np.float32)
    B, N = x.shape[0], x.shape[1]
    if N > cfg.window:
        raise ValueError(f"rollout length {N} exceeds window {cfg.window}")
    hist = np.zeros((B, 0) + x.shape[2:], dtype=np.float32)
    outs = []
    for n in range(N):
        def noise_fn(i, shape):
            return stream.normal(shape, dtype=np.float32)

        z0_hat = few_step_denoise_frame(
            params, cfg, schedule, hist, x[:, : n + 1], text, text_mask,
            ref_tokens, slots[: n + 1], noise_fn, counters=counters)
        outs.append(z0_hat)
        hist = np.concatenate([hist, z0_hat.numpy()], axis=1)
        if counters is not None:
            counters["rollout_frames"] = counters.get("rollout_frames", 0) + 1
    return outs


# ------------------------------------------------------ distribution match

def dmd_generator_grad(z0_hat: Tensor, v_data_fn, v_gen_fn, stream: RngStream,
                       *, eps_norm=DMD_EPS, norm_floor=DMD_NORM_FLOOR):
    """Surrogate loss whose gradient w.r.t. z0_hat is the DMD direction.

    v_*_fn(z_t numpy [B,...], t numpy [B]) -> velocity numpy, evaluated
    untracked. Returns (loss Tensor, info). info["clamped"] counts samples
    whose normalizer hit the floor.
    """
    B = z0_hat.shape[0]
    with T.no_grad():
        zh = z0_hat.numpy()
        t = stream.uniform((B,))
        eps = stream.normal(zh.shape, dtype=zh.dtype.type)
        z_t = fm_interpolate(zh, eps, t)
        t_b = t.reshape((B,) + (1,) * (zh.ndim - 1))
        x_hat_data = z_t - t_b * v_data_fn(z_t, t)
        x_hat_gen = z_t - t_b * v_gen_fn(z_t, t)
        reduce_axes = tuple(range(1, zh.ndim))
        norm = np.mean(np.abs(x_hat_data - zh), axis=reduce_axes) + eps_norm
        clamped = int(np.sum(norm < norm_floor))
        norm = np.maximum(norm, norm_floor)
        g = (x_hat_gen - x_hat_data) / norm.reshape(t_b.shape)
    loss = T.mul(T.sum_all(T.mul(z0_hat, Tensor(g.astype(zh.dtype)))), 1.0 / B)
    return loss, {"clamped": clamped, "t": t}


def update_gen_score(score: ScorePair, z0_hat_np, eval_fm_loss, stream: RngStream,
                     n_updates=5):
    """Refresh N_gen with flow matching on detached generator samples.

    eval_fm_loss(params, z_t numpy, t numpy [B,N], z0 numpy, z1 numpy) -> loss
    Tensor; post_train supplies a closure that runs the score forward with the
    right conditioning. Returns the per-update loss values.
    """
    B, N = z0_hat_np.shape[0], z0_hat_np.shape[1]
    values = []
    for _ in range(n_updates):
        t = stream.uniform((B,))
        t_full = np.repeat(t[:, None], N, axis=1)
        eps = stream.normal(z0_hat_np.shape, dtype=z0_hat_np.dtype.type)
        z_t = fm_interpolate(z0_hat_np, eps, t_full)
        score.opt.zero_grad()
        with T.Tape() as tape:
            loss = eval_fm_loss(score.gen_params, z_t, t_full, z0_hat_np, eps)
        T.backward(loss, tape, ensure=score.gen_params.values())
        score.opt.step()
        score.gen_updates += 1
        values.append(loss.item())
    return values


# --------------------------------------------------------------- adversary

def init_disc_head(cfg: ModelConfig, seed: int) -> dict:
    st = RngStream(seed, "disc.head")
    D = cfg.width
    s1 = np.float32(1.0 / np.sqrt(D))
    return {
        "d.w1": Tensor(st.normal((D, D), dtype=np.float32) * s1, requires_grad=True),
        "d.b1": Tensor(np.zeros(D, dtype=np.float32), requires_grad=True),
        "d.w2": Tensor(st.normal((D, 1), dtype=np.float32) * s1, requires_grad=True),
        "d.b2": Tensor(np.zeros(1, dtype=np.float32), requires_grad=True),
    }


def disc_logit(trunk_params, head, cfg, z_t, x, t_full, text, text_mask,
               ref_tokens=None, frame_slots=None):
    """Discriminator logit [B,1]: pooled mid-block trunk features -> MLP."""
    _, aux = forward(trunk_params, cfg, z_t, x, t_full, text, text_mask,
                     ref_tokens=ref_tokens, mode="bidirectional",
                     frame_slots=frame_slots, capture_features=True)
    h = T.gelu(T.add(T.matmul(aux["features"], head["d.w1"]), head["d.b1"]))
    logit = T.add(T.matmul(h, head["d.w2"]), head["d.b2"])
    return T.clamp(logit, -LOGIT_CLAMP, LOGIT_CLAMP)


def gan_losses(l_real: Tensor, l_fake: Tensor):
    """Non-saturating GAN losses from raw logits.

    loss_D = E[softplus(-l_real)] + E[softplus(l_fake)]
    loss_G = E[softplus(-l_fake)]
    """
    loss_d = T.add(T.mean_all(T.softplus(T.neg(l_real))),
                   T.mean_all(T.softplus(l_fake)))
    loss_g = T.mean_all(T.softplus(T.neg(l_fake)))
    return loss_d, loss_g


# -------------------------------------------------------------- post-train

def _clear_grads(*param_dicts):
    for d in param_dicts:
        for p in d.values():
            p.grad = None


def post_train(dataset_root, manifest, cfg: ModelConfig, student_params,
               teacher_params, *, outer_steps,
               schedule: TimestepSchedule = None, lr=2e-5, lambda_dmd=1.0,
               lambda_gan=0.05, batch_size=1, rollout_frames=None, seed=0,
               n_score_updates=5, out_ckpt=None, log_path=None, start_step=0,
               opt_states=None, score_pair=None, disc_head=None,
               save_every=None):
    """Stage 3 outer loop: [rollout, G step, 5x N_gen, D step].

    Returns (student_params, counters). Counter log per outer step:
    rollout_frames, gen_forwards, score_updates, disc_updates.
    """
    schedule = schedule or DEFAULT_SCHEDULE
    samples = synth.load_manifest(manifest)
    store = ClipStore(dataset_root, samples)
    N = rollout_frames or cfg.window
    if score_pair is None:
        score_pair = make_score_pair(teacher_params, cfg, lr)
    if disc_head is None:
        disc_head = init_disc_head(cfg, seed)
    gen_opt = Adam(student_params, lr=lr)
    disc_opt = Adam({**score_pair.gen_params, **disc_head}, lr=lr)
    if opt_states:
        if opt_states.get("gen"):
            gen_opt.load_state_arrays(opt_states["gen"])
        if opt_states.get("score"):
            score_pair.opt.load_state_arrays(opt_states["score"])
        if opt_states.get("disc"):
            disc_opt.load_state_arrays(opt_states["disc"])
    log = LossLog(log_path)
    guard = DivergenceGuard()
    counters = {"rollout_frames": 0, "gen_forwards": 0, "score_updates": 0,
                "disc_updates": 0, "outer_steps": 0, "clamped": 0}
    all_groups = (student_params, score_pair.gen_params, disc_head)

    for step in range(start_step, outer_steps):
        st = RngStream(seed, f"post.step{step}")
        idxs, _ = _draw_batch_idxs(store, st, batch_size)
        rot = int(st.integers(cfg.window, ()))
        slots = (rot + np.arange(N)) % cfg.window
        x_np, real_np = [], []
        for i in idxs:
            w0 = int(st.integers(store.n_frames(i) - N + 1, ()))
            x_np.append(store.source_latents(i)[w0:w0 + N])
            real_np.append(store.target_latents(i)[w0:w0 + N])
        x_np = np.stack(x_np)
        real_np = np.stack(real_np)
        x_t = Tensor(x_np)
        B = batch_size

        def score_v_fn(sparams):
            def fn(z_t, t):
                t_full = np.repeat(t[:, None], z_t.shape[1], axis=1)
                text_s, mask_s, ref_s = batch_condition(store, idxs, sparams)
                v, _ = forward(sparams, cfg, Tensor(z_t.astype(np.float32)), x_t,
                               t_full, text_s, mask_s, ref_tokens=ref_s,
                               mode="bidirectional", frame_slots=slots)
                return v.numpy()
            return fn

        # ---- generator step
        _clear_grads(*all_groups)
        with T.Tape() as tape:
            text_g, mask_g, ref_g = batch_condition(store, idxs, student_params)
            outs = self_rollout(student_params, cfg, schedule, x_np, text_g,
                                mask_g, ref_g, slots, st, counters=counters)
            z0_hat = T.concat(outs, axis=1) if len(outs) > 1 else outs[0]
            loss_dmd, info = dmd_generator_grad(
                z0_hat, score_v_fn(score_pair.data_params),
                score_v_fn(score_pair.gen_params), st)
            counters["clamped"] += info["clamped"]
            loss_g = T.mul(loss_dmd, lambda_dmd)
            adv_val = 0.0
            if lambda_gan > 0.0:
                t_f = st.uniform((B,))
                t_full = np.repeat(t_f[:, None], N, axis=1)
                eps_f = Tensor(st.normal(z0_hat.shape, dtype=np.float32))
                z_t_fake = fm_interpolate(z0_hat, eps_f, t_full)
                text_d, mask_d, ref_d = batch_condition(store, idxs,
                                                        score_pair.gen_params)
                l_fake = disc_logit(score_pair.gen_params, disc_head, cfg,
                                    z_t_fake, x_t, t_full, text_d, mask_d,
                                    ref_tokens=ref_d, frame_slots=slots)
                loss_adv = T.mean_all(T.softplus(T.neg(l_fake)))
                adv_val = loss_adv.item()
                loss_g = T.add(loss_g, T.mul(loss_adv, lambda_gan))
        T.backward(loss_g, tape, ensure=student_params.values())
        gen_opt.step()
        if not np.isfinite(loss_g.item()):
            raise T.NumericError(f"non-finite generator loss at step {step}")
        log.log(step, "dmd_loss", loss_dmd.item())
        log.log(step, "gan_g_loss", adv_val)

        # ---- 5x generator-score refresh on detached rollouts
        zh_np = z0_hat.numpy()

        def score_fm(sparams, z_t, t_full, z0, z1):
            text_s, mask_s, ref_s = batch_condition(store, idxs, sparams)
            v, _ = forward(sparams, cfg, Tensor(z_t.astype(np.float32)), x_t,
                           t_full, text_s, mask_s, ref_tokens=ref_s,
                           mode="bidirectional", frame_slots=slots)
            return fm_loss(v, Tensor(z0), Tensor(z1))

        _clear_grads(*all_groups)
        sc_losses = update_gen_score(score_pair, zh_np, score_fm, st,
                                     n_updates=n_score_updates)
        counters["score_updates"] += n_score_updates
        # the score fm loss is the stable positive signal for the guard
        guard.check(step, float(np.mean(sc_losses)))
        log.log(step, "score_fm_loss", float(np.mean(sc_losses)))

        # ---- discriminator step (trunk + head), real and fake at the same t
        _clear_grads(*all_groups)
        with T.Tape() as tape:
            t_d = st.uniform((B,))
            t_full = np.repeat(t_d[:, None], N, axis=1)
            z_t_real = fm_interpolate(
                real_np, st.normal(real_np.shape, dtype=np.float32), t_full)
            z_t_fake = fm_interpolate(
                zh_np, st.normal(zh_np.shape, dtype=np.float32), t_full)
            text_d, mask_d, ref_d = batch_condition(store, idxs,
                                                    score_pair.gen_params)
            l_real = disc_logit(score_pair.gen_params, disc_head, cfg,
                                Tensor(z_t_real.astype(np.float32)), x_t,
                                t_full, text_d, mask_d, ref_tokens=ref_d,
                                frame_slots=slots)
            l_fake = disc_logit(score_pair.gen_params, disc_head, cfg,
                                Tensor(z_t_fake.astype(np.float32)), x_t,
                                t_full, text_d, mask_d, ref_tokens=ref_d,
                                frame_slots=slots)
            loss_d, _ = gan_losses(l_real, l_fake)
        T.backward(loss_d, tape)
        disc_opt.step()
        counters["disc_updates"] += 1
        counters["outer_steps"] += 1
        log.log(step, "gan_d_loss", loss_d.item())

        score_pair.check_frozen()
        if save_every and (step + 1) % save_every == 0 and out_ckpt:
            _save_post_ckpt(out_ckpt, cfg, student_params, gen_opt, score_pair,
                            disc_head, disc_opt, step + 1, outer_steps)

    if out_ckpt:
        _save_post_ckpt(out_ckpt, cfg, student_params, gen_opt, score_pair,
                        disc_head, disc_opt, outer_steps, outer_steps)
    return student_params, counters


def _save_post_ckpt(path, cfg, params, gen_opt, score_pair, disc_head,
                    disc_opt, step, steps):
    arrays = params_to_arrays(params)
    arrays.update(gen_opt.state_arrays())
    for k, v in params_to_arrays(score_pair.gen_params).items():
        arrays["sg." + k] = v
    for k, v in score_pair.opt.state_arrays().items():
        arrays["sg." + k] = v
    for k, p in disc_head.items():
        arrays["dh." + k] = p.data
    for k, v in disc_opt.state_arrays().items():
        arrays["dh." + k] = v
    arrays["meta.stage"] = np.asarray(3, dtype=np.int64)
    arrays["meta.step"] = np.asarray(step, dtype=np.int64)
    arrays["meta.steps_total"] = np.asarray(steps, dtype=np.int64)
    save_checkpoint(path, cfg, arrays)


def load_post_ckpt(path, teacher_params, lr):
    """Rebuild stage-3 state from a post-training checkpoint.

    Returns (cfg, student_params, score_pair, disc_head, opt_states, meta).
    The frozen data-score network is reconstructed from the teacher weights;
    only the trainable halves live in the checkpoint.
    """
    cfg, arrays = load_checkpoint(path)
    student = arrays_to_params({k: v for k, v in arrays.items()
                                if k.startswith("p.")})
    gen_opt_state = {k: v for k, v in arrays.items() if k.startswith("opt.")}
    sg_params = arrays_to_params({k[3:]: v for k, v in arrays.items()
                                  if k.startswith("sg.p.")})
    sg_opt = {k[3:]: v for k, v in arrays.items() if k.startswith("sg.opt.")}
    head = {k[3:]: Tensor(arrays[k], requires_grad=True)
            for k in arrays if k.startswith("dh.d.")}
    disc_opt_state = {k[3:]: v for k, v in arrays.items()
                      if k.startswith("dh.opt.")}
    data = {k: Tensor(p.data.copy(), requires_grad=False)
            for k, p in teacher_params.items()}
    pair = ScorePair(data, sg_params, cfg, Adam(sg_params, lr=lr))
    pair.opt.load_state_arrays(sg_opt)
    meta = {key: int(arrays[f"meta.{key}"]) for key in
            ("stage", "step", "steps_total") if f"meta.{key}" in arrays}
    opt_states = {"gen": gen_opt_state, "score": None, "disc": disc_opt_state}
    return cfg, student, pair, head, opt_states, meta
