"""Acceptance suite: one test per shipped guarantee, asserted at its
stated tolerance and time budget.

Trained-model checks (c06 pipeline quality, c07 drift ablation) load the
committed pilot artifacts under pilot/ by default; set RTR_ACCEPT_FULL=1
to retrain the three stages from scratch first and evaluate that run
instead. Everything else runs on random weights and is self-contained.
"""

import csv
import os
import socket
import subprocess
import time
from pathlib import Path

import numpy as np
import pytest

import rtr.tensor as T
from _oracles import fd_grad, max_rel_err, rand_params
from _reference import reference_forward
from rtr import protocol as P
from rtr.checkpoint import load_checkpoint
from rtr.cli import eval_model, main, make_eval_clips
from rtr.conditioning import RV2V_INSTRUCTION_ID
from rtr.config import EvalConfig
from rtr.distill import dmd_generator_grad, param_hash
from rtr.evals import drift_eval
from rtr.model import ModelConfig, forward, init_params
from rtr.rng import RngStream
from rtr.server import StreamServer
from rtr.stream import init_session, make_session
from rtr.synth import apply_style, default_styles, gen_video
from rtr.tensor import Tensor
from rtr.training import TimestepSchedule, fm_interpolate
from test_stream import oracle_rollout

PILOT = Path(__file__).resolve().parent.parent / "pilot"
SMALL = ModelConfig(latent_h=4, latent_w=4, width=16, heads=2, layers=2,
                    window=4, vocab=32)
RUN8 = ModelConfig(latent_h=8, latent_w=8, width=32, heads=2, layers=2,
                   window=8)


def _inputs(cfg, B, N, seed, with_ref=True):
    st = RngStream(seed, "accept.inputs")
    z_t = st.normal((B, N, cfg.latent_h, cfg.latent_w, 12), dtype=np.float64)
    x = st.normal((B, N, cfg.latent_h, cfg.latent_w, 12), dtype=np.float64)
    t = st.uniform((B, N))
    text = st.normal((B, 5, cfg.width), dtype=np.float64)
    mask = np.zeros((B, 5))
    mask[:, -1] = -np.inf
    ref = None
    if with_ref:
        ref = st.normal((B, cfg.tokens_per_frame, cfg.width), dtype=np.float64)
    return z_t, x, t, text, mask, ref


# ---------------------------------------------------------------- causality

def test_c01_causality_exact_and_bidirectional_witness():
    """Perturbing frame j never changes any output of frames < j (exact
    equality), for N in {2,3,4}; the bidirectional mode must show a
    counterexample. Budget: under a minute."""
    t0 = time.monotonic()
    rng = np.random.default_rng(41)
    for n_frames in (2, 3, 4):
        params = rand_params(SMALL, 40 + n_frames)
        z, x, t, text, mask, ref = _inputs(SMALL, 1, n_frames, seed=n_frames)

        def run(zz, xx, tt):
            out, _ = forward(params, SMALL, Tensor(zz, dtype="f64"),
                             Tensor(xx, dtype="f64"), tt,
                             Tensor(text, dtype="f64"), mask,
                             ref_tokens=Tensor(ref, dtype="f64"), mode="causal")
            return out.numpy()

        base = run(z, x, t)
        for j in range(1, n_frames):
            z_p, x_p, t_p = z.copy(), x.copy(), t.copy()
            z_p[:, j:] += rng.normal(size=z_p[:, j:].shape)
            x_p[:, j:] += rng.normal(size=x_p[:, j:].shape)
            t_p[:, j:] = rng.uniform(size=t_p[:, j:].shape)
            np.testing.assert_array_equal(run(z_p, x_p, t_p)[:, :j], base[:, :j])

    params = rand_params(SMALL, 44)
    z, x, t, text, mask, _ = _inputs(SMALL, 1, 3, seed=9, with_ref=False)
    base, _ = forward(params, SMALL, Tensor(z, dtype="f64"),
                      Tensor(x, dtype="f64"), t, Tensor(text, dtype="f64"),
                      mask, mode="bidirectional")
    z_p = z.copy()
    z_p[:, 2] += 1.0
    out, _ = forward(params, SMALL, Tensor(z_p, dtype="f64"),
                     Tensor(x, dtype="f64"), t, Tensor(text, dtype="f64"),
                     mask, mode="bidirectional")
    assert np.abs(out.numpy()[:, 0] - base.numpy()[:, 0]).max() > 1e-12
    assert time.monotonic() - t0 < 60.0


# ------------------------------------------------------ streaming equivalence

def test_c02_streaming_matches_monolithic_and_windowed_oracle():
    """Engine output vs a monolithic causal rollout: within the window the
    oracle IS the full joint forward; beyond it, the last-(W-1)+anchor
    window. Max relative error < 1e-4 per frame. Budget: under 2 min."""
    t0 = time.monotonic()
    params = init_params(RUN8, seed=3)
    for p in params.values():
        p.requires_grad = False
    st = RngStream(77, "accept.src")
    sources = st.uniform((13, 16, 16, 3)).astype(np.float32)
    sched = TimestepSchedule.parse("1.0,0.5")
    for mode, ids, ref in (("tv2v", [2], None),
                           ("rv2v", [RV2V_INSTRUCTION_ID], sources[0])):
        sess = make_session(params, RUN8, mode, ids, ref_frame=ref, seed=5)
        want = oracle_rollout(params, RUN8, sched, sources, mode, ids, ref, 5)
        for i, f in enumerate(sources):
            got = sess.process_frame(f)
            assert max_rel_err(got, want[i]) < 1e-4, f"{mode} frame {i + 1}"
    assert time.monotonic() - t0 < 120.0


# ------------------------------------- interpolation endpoints and attention

def test_c03_interpolation_endpoints_softmax_attention_brute_force():
    """z_t at t=0 is exactly z0 and at t=1 exactly z1; masked softmax and
    the full attention forward match a brute-force reference to 1e-5."""
    st = RngStream(50, "accept.eq2")
    z0 = st.normal((2, 3, 4, 4, 12), dtype=np.float32)
    z1 = st.normal((2, 3, 4, 4, 12), dtype=np.float32)
    assert np.array_equal(fm_interpolate(z0, z1, 0.0), z0)
    assert np.array_equal(fm_interpolate(z0, z1, 1.0), z1)
    t_edge = np.zeros((2, 3))
    t_edge[1, :] = 1.0
    mixed = fm_interpolate(z0, z1, t_edge)
    assert np.array_equal(mixed[0], z0[0])
    assert np.array_equal(mixed[1], z1[1])
    ta = T.Tensor(z0, dtype="f32")
    tb = T.Tensor(z1, dtype="f32")
    assert np.array_equal(fm_interpolate(ta, tb, 0.0).numpy(), z0)
    assert np.array_equal(fm_interpolate(ta, tb, 1.0).numpy(), z1)

    logits = st.normal((4, 6, 6), dtype=np.float64)
    mask = np.zeros((6, 6))
    mask[np.triu_indices(6, 1)] = -np.inf
    got = T.softmax_lastdim(T.Tensor(logits, dtype="f64"), mask=mask).numpy()
    shifted = logits + mask
    e = np.exp(shifted - shifted.max(axis=-1, keepdims=True))
    e[np.broadcast_to(mask == -np.inf, e.shape)] = 0.0
    want = e / e.sum(axis=-1, keepdims=True)
    assert max_rel_err(got, want) < 1e-5

    params = rand_params(SMALL, 51)
    z, x, t, text, tmask, ref = _inputs(SMALL, 2, 3, seed=52)
    for mode in ("causal", "bidirectional"):
        got, _ = forward(params, SMALL, Tensor(z, dtype="f64"),
                         Tensor(x, dtype="f64"), t, Tensor(text, dtype="f64"),
                         tmask, ref_tokens=Tensor(ref, dtype="f64"), mode=mode)
        W = {k: p.data for k, p in params.items()}
        want = reference_forward(W, SMALL, z, x, t, text, tmask,
                                 ref_tokens=ref, mode=mode)
        assert max_rel_err(got.numpy(), want) < 1e-5


# ---------------------------------------------------------------- gradients

def test_c04_gradients_match_finite_differences():
    """Autodiff vs central differences in f64 through the full model: the
    complete input gradient plus sampled entries of every parameter tensor
    in every block, max relative error < 1e-3. Budget: under 5 min."""
    t0 = time.monotonic()
    cfg = ModelConfig(latent_h=4, latent_w=4, width=8, heads=2, layers=2,
                      window=4, vocab=16)
    params = rand_params(cfg, 60, scale=0.1)
    z, x, t, text, mask, ref = _inputs(cfg, 1, 2, seed=61)
    proj = np.random.default_rng(62).normal(size=(1, 2, 4, 4, 12))

    def run(z_np, params_):
        with T.Tape() as tape:
            v, _ = forward(params_, cfg, Tensor(z_np, dtype="f64"),
                           Tensor(x, dtype="f64"), t, Tensor(text, dtype="f64"),
                           mask, ref_tokens=Tensor(ref, dtype="f64"),
                           mode="causal")
            loss = T.sum_all(T.mul(v, Tensor(proj, dtype="f64")))
        return loss, tape

    z_in = Tensor(z, dtype="f64", requires_grad=True)
    with T.Tape() as tape:
        v, _ = forward(params, cfg, z_in, Tensor(x, dtype="f64"), t,
                       Tensor(text, dtype="f64"), mask,
                       ref_tokens=Tensor(ref, dtype="f64"), mode="causal")
        loss = T.sum_all(T.mul(v, Tensor(proj, dtype="f64")))
    T.backward(loss, tape, ensure=params.values())
    num = fd_grad(lambda z_np: run(z_np, params)[0].item(), z)
    assert max_rel_err(z_in.grad, num) < 1e-3

    h = 1e-4
    rng = np.random.default_rng(63)
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(3, flat.size), replace=False)
        for idx in picks:
            keep = flat[idx]
            flat[idx] = keep + h
            up = run(z, params)[0].item()
            flat[idx] = keep - h
            dn = run(z, params)[0].item()
            flat[idx] = keep
            fd = (up - dn) / (2 * h)
            ad = p.grad.reshape(-1)[idx]
            worst = max(worst, max_rel_err(np.array(ad), np.array(fd)))
    assert worst < 1e-3, f"worst parameter gradient rel err {worst:.2e}"
    assert time.monotonic() - t0 < 300.0


# --------------------------------------------------------------------- dmd

def test_c05_dmd_null_exact_and_gaussian_convergence():
    """Equal score estimates give an exactly zero generator gradient; with
    analytic 1D Gaussian scores, descending the DMD gradient moves the
    generator mean to the data mean within 1e-2 in 500 steps."""
    st = RngStream(70, "accept.dmd")
    zh = st.normal((4, 3), dtype=np.float64)

    def v_same(z_t, t):
        return np.cos(z_t) - t[:, None]

    leaf = Tensor(zh, requires_grad=True)
    with T.Tape() as tape:
        loss, _ = dmd_generator_grad(leaf, v_same, v_same, RngStream(71, "n"))
    T.backward(loss, tape)
    assert loss.item() == 0.0
    assert np.array_equal(leaf.grad, np.zeros_like(zh))

    def gaussian_v(mu, sigma):
        # velocity of the flow towards N(mu, sigma^2): E[z1 - z0 | z_t]
        def fn(z_t, t):
            tb = t[:, None]
            var = (1 - tb) ** 2 * sigma ** 2 + tb ** 2
            x_hat = mu + (1 - tb) * sigma ** 2 * (z_t - (1 - tb) * mu) / var
            return (z_t - x_hat) / tb
        return fn

    mu_data, sigma, m = -0.4, 0.3, 0.5
    gst = RngStream(72, "accept.gauss")
    for _ in range(500):
        xi = gst.normal((64, 1), dtype=np.float64)
        m_t = Tensor(np.array([m]), requires_grad=True)
        with T.Tape() as tape:
            z_hat = T.add(Tensor(sigma * xi), m_t)
            loss, _ = dmd_generator_grad(z_hat, gaussian_v(mu_data, sigma),
                                         gaussian_v(m, sigma), gst)
        T.backward(loss, tape)
        m = m - 0.05 * float(m_t.grad[0])
    assert abs(m - mu_data) < 1e-2


# ----------------------------------------------------------- trained model

def _pilot_ckpt(tmp_path_factory):
    if os.environ.get("RTR_ACCEPT_FULL") == "1":
        root = tmp_path_factory.mktemp("accept_full")
        ini = root / "run.ini"
        ini.write_text(f"[data]\nroot = {root / 'data'}\n\n[eval]\nclips = 50\n")
        t0 = time.monotonic()
        cfg = ["--config", str(ini)]
        assert main(["synth", *cfg]) == 0
        assert main(["train-teacher", *cfg, "--out", str(root / "t.ckpt")]) == 0
        assert main(["init-student", *cfg, "--teacher", str(root / "t.ckpt"),
                     "--out", str(root / "s.ckpt")]) == 0
        assert main(["distill", *cfg, "--teacher", str(root / "t.ckpt"),
                     "--student", str(root / "s.ckpt"),
                     "--out", str(root / "p.ckpt")]) == 0
        assert time.monotonic() - t0 < 3600.0
        return str(root / "p.ckpt")
    ckpt = PILOT / "post.ckpt"
    if not ckpt.exists():
        pytest.fail("pilot/post.ckpt missing: restore the committed pilot "
                    "artifacts or run with RTR_ACCEPT_FULL=1")
    return str(ckpt)


@pytest.fixture(scope="module")
def trained_ckpt(tmp_path_factory):
    return _pilot_ckpt(tmp_path_factory)


def _log_steps(path):
    with open(path) as fh:
        return max(int(row["step"]) for row in csv.DictReader(fh))


def test_c06_pipeline_style_match_and_psnr_margin(trained_ckpt):
    """The distilled 2-step student, trained within the stage budgets,
    reaches style_match_accuracy >= 0.85 on 50 held-out clips and beats
    the copy-source baseline by >= 3 dB against oracle targets."""
    _, arrays = load_checkpoint(trained_ckpt)
    assert int(arrays["meta.stage"]) == 3
    assert int(arrays["meta.steps_total"]) <= 1000
    if os.environ.get("RTR_ACCEPT_FULL") != "1":
        assert _log_steps(PILOT / "teacher.ckpt.log.csv") <= 2000 - 1
        assert _log_steps(PILOT / "student.ckpt.log.csv") <= 2000 - 1

    clips = make_eval_clips(EvalConfig(clips=50, seed=100, frames=16), 32)

    def factory(mode, prompt, ref):
        return init_session(trained_ckpt, mode, prompt, ref_frame=ref, seed=0)

    agg = eval_model(factory, clips, default_styles())
    margin = agg["mean_target_psnr_db"] - agg["baseline_psnr_db"]
    print(f"\n  style_match_accuracy={agg['style_match_accuracy']:.3f} "
          f"(need >= 0.85), psnr margin={margin:+.2f} dB (need >= 3.0)")
    assert agg["n_cases"] == 50
    assert agg["style_match_accuracy"] >= 0.85
    assert margin >= 3.0


def test_c07_reference_preserving_reduces_drift(trained_ckpt):
    """Over 200-frame rollouts with 5 paired seeds, keeping the reference
    anchored gives last-50-frame drift <= the non-preserving run on at
    least 4 of 5 seeds."""
    styles = default_styles()
    wins = []
    for i, seed in enumerate((11, 12, 13, 14, 15)):
        style = styles[i]
        source = gen_video(900 + seed, 200, 32)
        ref = apply_style(style, source[0])

        def factory(preserve):
            return init_session(trained_ckpt, "rv2v", [RV2V_INSTRUCTION_ID],
                                ref_frame=ref, seed=seed,
                                preserve_ref=preserve)

        d = drift_eval(factory, source, style, last=50)
        wins.append(d["last_on"] <= d["last_off"])
        print(f"\n  seed {seed}: last50 on={d['last_on']:.5f} "
              f"off={d['last_off']:.5f} {'WIN' if wins[-1] else 'LOSS'}")
    assert sum(wins) >= 4, f"reference preservation won only {sum(wins)}/5"


# ----------------------------------------------------------------- switching

def test_c08_switch_resets_cache_structurally():
    """After set_condition every layer's ring holds exactly one frame, the
    cross cache fingerprint equals a fresh session's for the same
    condition, and an anchored block exists iff the condition carries a
    reference."""
    params = init_params(SMALL, seed=8)
    for p in params.values():
        p.requires_grad = False
    st = RngStream(80, "accept.sw")
    src = st.uniform((5, 8, 8, 3)).astype(np.float32)
    sess = make_session(params, SMALL, "tv2v", [2], seed=1)
    for f in src[:4]:
        sess.process_frame(f)

    sess.set_condition("rv2v", [RV2V_INSTRUCTION_ID], ref_frame=src[4])
    fresh = make_session(params, SMALL, "rv2v", [RV2V_INSTRUCTION_ID],
                         ref_frame=src[4], seed=1)
    want_digests = [e["cross_digest"] for e in fresh.cache_snapshot()]
    for e, want in zip(sess.cache_snapshot(), want_digests):
        assert e["filled"] == 1 and len(e["ring_ids"]) == 1
        assert e["ring_ids"] == [4]
        assert e["anchored"] == SMALL.tokens_per_frame
        assert e["cross_digest"] == want

    sess.set_condition("tv2v", [3])
    fresh = make_session(params, SMALL, "tv2v", [3], seed=1)
    want_digests = [e["cross_digest"] for e in fresh.cache_snapshot()]
    for e, want in zip(sess.cache_snapshot(), want_digests):
        assert e["filled"] == 1
        assert e["anchored"] == 0
        assert e["cross_digest"] == want


# ------------------------------------------------------------------- latency

def test_c09_latency_flat_and_two_forwards_per_frame():
    """Per-frame latency is O(window): the least-squares slope over 500
    steady-state frames stays under 1% of the mean, and the K=2 schedule
    spends exactly 2 generator forwards per frame."""
    params = init_params(SMALL, seed=9)
    for p in params.values():
        p.requires_grad = False
    sess = make_session(params, SMALL, "tv2v", [1], seed=2)
    st = RngStream(90, "accept.lat")
    src = st.uniform((510, 8, 8, 3)).astype(np.float32)
    times = []
    for f in src:
        t0 = time.perf_counter()
        sess.process_frame(f)
        times.append(time.perf_counter() - t0)
    assert sess.counters["denoise_forwards"] == 2 * 510
    steady = np.asarray(times[10:]) * 1e3
    slope = float(np.polyfit(np.arange(steady.size), steady, 1)[0])
    mean = float(steady.mean())
    print(f"\n  mean={mean:.2f} ms, slope={slope * 1e3:+.2f} us/frame "
          f"({abs(slope) / mean * 100:.3f}% of mean)")
    assert abs(slope) < 0.01 * mean


# ------------------------------------------------------------------ protocol

def _drive(port, stream):
    sock = socket.create_connection(("127.0.0.1", port), timeout=30)
    reader = P.MessageReader()
    out = bytearray()
    replies = 0
    # hello, then one reply per frame sent
    want = 1 + sum(1 for t_, _ in stream if t_ == P.MSG_FRAME_IN)
    for t_, payload in stream:
        sock.sendall(P.encode_message(t_, payload))
    while replies < want:
        data = sock.recv(65536)
        assert data
        out.extend(data)
        reader.feed(data)
        replies += sum(1 for _ in reader)
    sock.close()
    return bytes(out)


def test_c10_protocol_golden_replay_and_isolation():
    """The same recorded byte stream into a fresh server yields a
    bit-identical reply stream under a fixed seed; two interleaved
    sessions reproduce their solo outputs and leave weights untouched."""
    params = init_params(SMALL, seed=10)
    for p in params.values():
        p.requires_grad = False
    st = RngStream(95, "accept.proto")
    frames = st.uniform((4, 8, 8, 3)).astype(np.float32)
    stream = [(P.MSG_SET_PROMPT, P.encode_set_prompt([2]))]
    stream += [(P.MSG_FRAME_IN, P.encode_frame(f)) for f in frames]

    outs = []
    for _ in range(2):
        srv = StreamServer(params, SMALL, seed=6).start()
        try:
            outs.append(_drive(srv.port, stream))
        finally:
            srv.stop()
    assert outs[0] == outs[1]

    before = param_hash(params)
    solo = []
    for ids, lo in (([2], 0), ([3], 2)):
        sess = make_session(params, SMALL, "tv2v", [], seed=6)
        sess.set_condition("tv2v", ids)
        solo.append([sess.process_frame(f) for f in frames[lo:lo + 2]])
    srv = StreamServer(params, SMALL, seed=6).start()
    try:
        socks = []
        for ids in ([2], [3]):
            s = socket.create_connection(("127.0.0.1", srv.port), timeout=30)
            r = P.MessageReader()
            socks.append((s, r))
            _recv_one(s, r)  # hello
            s.sendall(P.encode_message(P.MSG_SET_PROMPT, P.encode_set_prompt(ids)))
        for i in range(2):
            for j, (s, r) in enumerate(socks):
                s.sendall(P.encode_message(P.MSG_FRAME_IN,
                                           P.encode_frame(frames[2 * j + i])))
            for j, (s, r) in enumerate(socks):
                mtype, payload = _recv_one(s, r)
                assert mtype == P.MSG_FRAME_OUT
                got = P.decode_frame(payload, 8, 8)
                assert np.array_equal(got, solo[j][i])
        for s, _ in socks:
            s.close()
    finally:
        srv.stop()
    assert param_hash(params) == before


def _recv_one(sock, reader):
    while True:
        for m in reader:
            return m
        data = sock.recv(65536)
        assert data
        reader.feed(data)


# ---------------------------------------------------------------- frontend

def test_c11_console_streams_and_switches():
    """Scripted console session: 64 frames streamed over the wire with the
    reference -> prompt -> prompt switch sequence, switch-effect frame
    indices asserted, connection alive at the end, frames out == frames
    in. Runs the console package's integration suite; skipped when its
    dependencies are not installed."""
    front = Path(__file__).resolve().parent.parent / "frontend"
    if not (front / "node_modules").exists():
        pytest.skip("frontend dependencies not installed (npm install)")
    proc = subprocess.run(
        ["npm", "run", "--silent", "test:integration"], cwd=front,
        capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stdout + proc.stderr
