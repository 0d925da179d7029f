"""Operator surface: one subcommand per pipeline stage plus file streaming
and the live server.

Stage commands check their prerequisite artifacts up front and fail with a
stage-order message naming what is missing and which command produces it.
Every artifact-producing run writes the fully resolved config next to its
output, so results are reproducible from disk alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import threading

import numpy as np

from . import codec
from .conditioning import RV2V_INSTRUCTION_ID, VocabularyError, default_vocab
from .config import ConfigError, load_config
from .evals import (EvalReport, clip_eval, drift_eval, latency_eval,
                    save_curves_csv)
from .rng import RngStream
from .stream import SessionFailed, init_session
from .synth import apply_style, default_styles, gen_video, make_dataset
from .tensor import NumericError, ShapeError
from .training import (TimestepSchedule, load_train_ckpt, train_student_init,
                       train_teacher)

log = logging.getLogger("rtr.cli")


class StageOrderError(RuntimeError):
    """A prerequisite artifact for this stage does not exist."""


def _require(path, what, producer):
    if not os.path.exists(path):
        raise StageOrderError(
            f"stage order: missing {what} at {path} (run '{producer}' first)")


def _write_resolved(run_cfg, out_path):
    path = out_path + ".resolved.ini"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(run_cfg.to_text())
    log.info("resolved config:\n%s", run_cfg.to_text())
    return path


def _schedule(args, fallback: str) -> TimestepSchedule:
    return TimestepSchedule.parse(args.schedule or fallback)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    run = load_config(args.config)
    d = run.data
    out = args.out or d.root
    seed = d.seed if args.seed is None else args.seed
    manifest = make_dataset(out, d.n_samples, d.mix_tv2v, seed,
                            n_frames=d.n_frames, size=d.size,
                            clip_reuse=d.clip_reuse)
    _write_resolved(run, os.path.join(out, "dataset"))
    print(f"wrote {d.n_samples} clips, manifest {manifest}")
    return 0


def cmd_train_teacher(args) -> int:
    run = load_config(args.config)
    root = args.data or run.data.root
    manifest = os.path.join(root, "manifest.txt")
    _require(manifest, "dataset manifest", "rtr synth")
    t = run.teacher
    seed = t.seed if args.seed is None else args.seed
    steps = args.steps or t.steps
    cfg = run.model
    if args.window:
        cfg = dataclasses.replace(cfg, window=args.window)
    _write_resolved(run, args.out)
    train_teacher(root, manifest, cfg, steps=steps, lr=t.lr,
                  batch_size=t.batch_size, seed=seed, out_ckpt=args.out,
                  log_path=args.out + ".log.csv", save_every=t.save_every,
                  t_min=t.t_min)
    print(f"teacher checkpoint {args.out} ({steps} steps)")
    return 0


def cmd_init_student(args) -> int:
    run = load_config(args.config)
    root = args.data or run.data.root
    manifest = os.path.join(root, "manifest.txt")
    _require(manifest, "dataset manifest", "rtr synth")
    _require(args.teacher, "teacher checkpoint", "rtr train-teacher")
    cfg, teacher_params, _, _ = load_train_ckpt(args.teacher)
    s = run.student
    seed = s.seed if args.seed is None else args.seed
    steps = args.steps or s.steps
    _write_resolved(run, args.out)
    train_student_init(root, manifest, cfg, teacher_params, steps=steps,
                       schedule=_schedule(args, s.schedule), lr=s.lr,
                       batch_size=s.batch_size, seed=seed, out_ckpt=args.out,
                       log_path=args.out + ".log.csv", save_every=s.save_every)
    print(f"student checkpoint {args.out} ({steps} steps)")
    return 0


def cmd_distill(args) -> int:
    from .distill import post_train  # local import: heaviest module

    run = load_config(args.config)
    root = args.data or run.data.root
    manifest = os.path.join(root, "manifest.txt")
    _require(manifest, "dataset manifest", "rtr synth")
    _require(args.teacher, "teacher checkpoint", "rtr train-teacher")
    _require(args.student, "student checkpoint", "rtr init-student")
    cfg, student_params, _, _ = load_train_ckpt(args.student)
    _, teacher_params, _, _ = load_train_ckpt(args.teacher)
    p = run.post
    seed = p.seed if args.seed is None else args.seed
    steps = args.steps or p.steps
    _write_resolved(run, args.out)
    post_train(root, manifest, cfg, student_params, teacher_params,
               outer_steps=steps, schedule=_schedule(args, p.schedule),
               lr=p.lr, lambda_dmd=p.lambda_dmd, lambda_gan=p.lambda_gan,
               batch_size=p.batch_size, rollout_frames=p.rollout_frames,
               seed=seed, n_score_updates=p.n_score_updates,
               out_ckpt=args.out, log_path=args.out + ".log.csv",
               save_every=p.save_every)
    print(f"distilled checkpoint {args.out} ({steps} outer steps)")
    return 0


def make_eval_clips(eval_cfg, size):
    """Held-out clips: seeds keyed off the eval stream, disjoint from any
    training draw. Alternates prompt and reference conditioning; the
    reference is the styled frame, matching how training conditions."""
    styles = default_styles()
    clips = []
    for i in range(eval_cfg.clips):
        st = RngStream(eval_cfg.seed, f"eval.clip.{i}")
        clip_seed = int(st.integers(2 ** 31, ()))
        source = gen_video(clip_seed, eval_cfg.frames, size)
        style = styles[i % len(styles)]
        if i % 2 == 0:
            clips.append({"source": source, "style": style, "mode": "tv2v",
                          "prompt": [default_vocab().id(style.name)],
                          "ref": None})
        else:
            ref_idx = int(st.integers(eval_cfg.frames, ()))
            ref = apply_style(style, source[ref_idx])
            clips.append({"source": source, "style": style, "mode": "rv2v",
                          "prompt": [RV2V_INSTRUCTION_ID], "ref": ref})
    return clips


def eval_model(session_factory, clips, styles) -> dict:
    """Aggregate clip_eval over held-out clips.

    session_factory(mode, prompt_ids, ref_frame) -> object with
    process_frame; a fresh session per clip.
    """
    rows = []
    for c in clips:
        sess = session_factory(c["mode"], c["prompt"], c["ref"])
        outs = np.stack([sess.process_frame(f) for f in c["source"]])
        rows.append(clip_eval(outs, c["source"], c["style"], styles))
    return {
        "style_match_accuracy": float(np.mean([r["style_accuracy"] for r in rows])),
        "n_cases": len(rows),
        "mean_target_psnr_db": float(np.mean([r["psnr_db"] for r in rows])),
        "baseline_psnr_db": float(np.mean([r["baseline_psnr_db"] for r in rows])),
        "frame_consistency": float(np.mean([r["frame_consistency"] for r in rows])),
    }


def cmd_eval(args) -> int:
    run = load_config(args.config)
    _require(args.ckpt, "model checkpoint", "rtr distill")
    seed = run.stream.seed if args.seed is None else args.seed
    sched = _schedule(args, run.stream.schedule)

    def factory(mode, prompt, ref):
        return init_session(args.ckpt, mode, prompt, ref_frame=ref, seed=seed,
                            schedule=sched)

    clips = make_eval_clips(run.eval, run.data.size)
    agg = eval_model(factory, clips, default_styles())
    lat_session = factory("tv2v", clips[0]["prompt"], None)
    lat = latency_eval(lat_session, clips[0]["source"])

    # short paired drift section on one reference-conditioned clip; the
    # long-rollout ablation is a separate experiment
    rc = next(c for c in clips if c["mode"] == "rv2v")
    drift_src = np.concatenate([rc["source"]] * 2)
    drift = drift_eval(
        lambda preserve: factory_preserve(args, seed, sched, rc, preserve),
        drift_src, rc["style"], last=min(50, len(drift_src)))
    save_curves_csv(args.out + ".curves.csv",
                    {"drift_on": drift["curve_on"],
                     "drift_off": drift["curve_off"]})

    report = EvalReport(drift_last50_on=drift["last_on"],
                        drift_last50_off=drift["last_off"],
                        latency_mean_ms=lat["mean_ms"],
                        latency_p95_ms=lat["p95_ms"], **agg)
    report.save(args.out)
    print(report.to_text(), end="")
    return 0


def factory_preserve(args, seed, sched, clip, preserve):
    return init_session(args.ckpt, clip["mode"], clip["prompt"],
                        ref_frame=clip["ref"], seed=seed, schedule=sched,
                        preserve_ref=preserve)


def parse_switch_script(path):
    """Lines: '<frame> PROMPT tok ...' or '<frame> REF video.rtrv [index]'.

    The switch applies before the named 1-based frame. Errors name the line.
    """
    vocab = default_vocab()
    switches = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                frame = int(parts[0])
            except ValueError:
                raise ValueError(
                    f"switch script line {ln}: bad frame index {parts[0]!r}"
                ) from None
            if frame < 1:
                raise ValueError(f"switch script line {ln}: frame must be >= 1")
            if len(parts) < 2 or parts[1] not in ("PROMPT", "REF"):
                raise ValueError(
                    f"switch script line {ln}: expected PROMPT or REF")
            if parts[1] == "PROMPT":
                try:
                    ids = [vocab.id(w) for w in parts[2:]]
                except VocabularyError as exc:
                    raise ValueError(f"switch script line {ln}: {exc}") from None
                switches.append((frame, "tv2v", ids, None))
            else:
                if len(parts) not in (3, 4):
                    raise ValueError(
                        f"switch script line {ln}: REF takes a path and an "
                        f"optional frame index")
                idx = int(parts[3]) if len(parts) == 4 else 0
                switches.append((frame, "rv2v", [RV2V_INSTRUCTION_ID],
                                 (parts[2], idx)))
    return sorted(switches, key=lambda s: s[0])


def cmd_stream(args) -> int:
    _require(args.ckpt, "model checkpoint", "rtr distill")
    frames, fps = codec.load_video(args.infile)
    switches = parse_switch_script(args.script) if args.script else []
    for _, _, _, ref_spec in switches:
        if ref_spec is not None and not os.path.exists(ref_spec[0]):
            raise ValueError(
                f"switch script references missing file {ref_spec[0]}")
    mode, prompt, ref = "tv2v", [], None
    if args.prompt:
        vocab = default_vocab()
        prompt = [vocab.id(w) for w in args.prompt.split()]
    if args.ref:
        ref_frames, _ = codec.load_video(args.ref)
        mode, prompt, ref = "rv2v", [RV2V_INSTRUCTION_ID], ref_frames[0]
    sched = _schedule(args, "1.0,0.5")
    session = init_session(args.ckpt, mode, prompt, ref_frame=ref,
                           seed=args.seed or 0, schedule=sched,
                           preserve_ref=not args.no_preserve_ref)
    pending = list(switches)
    outs = []
    for i, f in enumerate(frames, start=1):
        while pending and pending[0][0] == i:
            _, sw_mode, sw_ids, sw_ref = pending.pop(0)
            sw_frame = None
            if sw_ref is not None:
                ref_clip, _ = codec.load_video(sw_ref[0])
                sw_frame = ref_clip[sw_ref[1]]
            session.set_condition(sw_mode, sw_ids, ref_frame=sw_frame)
            snap = session.cache_snapshot()[0]
            log.info("switch before frame %d: ring filled=%d anchored=%d",
                     i, snap["filled"], snap["anchored"])
        outs.append(session.process_frame(f))
    codec.save_video(args.out, np.stack(outs), fps=fps)
    st = session.stats()
    print(f"{len(outs)} frames -> {args.out} "
          f"(mean {st['mean_ms']:.1f} ms, p95 {st['p95_ms']:.1f} ms)")
    return 0


def cmd_serve(args) -> int:
    from .server import serve

    _require(args.ckpt, "model checkpoint", "rtr distill")
    host, _, port_s = args.bind.rpartition(":")
    host = host or "127.0.0.1"
    try:
        port = int(port_s)
    except ValueError:
        raise ValueError(f"bad bind address {args.bind!r}, want host:port") from None
    sched = _schedule(args, "1.0,0.5")
    server = serve(args.ckpt, host, port, seed=args.seed or 0, schedule=sched)
    # flush so a supervisor piping stdout can pick up the port immediately
    print(f"serving on {host}:{server.port}", flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        server.stop()
    return 0


# -------------------------------------------------------------------- main

def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rtr",
                                 description="autoregressive video rerenderer")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="INI run config")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    common(p)
    p.add_argument("--out", default=None, help="dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-teacher", help="stage 1: bidirectional teacher")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True, help="teacher checkpoint path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--window", type=int, default=None)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("init-student", help="stage 2: causal student init")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--schedule", default=None)
    p.set_defaults(func=cmd_init_student)

    p = sub.add_parser("distill", help="stage 3: post-training")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--schedule", default=None)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="held-out metrics report")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="report path")
    p.add_argument("--schedule", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stream", help="file-to-file streaming rerender")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True, help="input .rtrv")
    p.add_argument("--out", required=True, help="output .rtrv")
    p.add_argument("--prompt", default=None, help="space-separated tokens")
    p.add_argument("--ref", default=None, help="reference .rtrv (frame 0)")
    p.add_argument("--script", default=None, help="switch script path")
    p.add_argument("--schedule", default=None)
    p.add_argument("--no-preserve-ref", action="store_true")
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("serve", help="binary-protocol streaming server")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bind", default="127.0.0.1:7060")
    p.add_argument("--schedule", default=None)
    p.set_defaults(func=cmd_serve)

    return ap


def main(argv=None) -> int:
    level = os.environ.get("RTR_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (StageOrderError, ConfigError, ValueError, VocabularyError,
            ShapeError, NumericError, SessionFailed, OSError,
            RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
