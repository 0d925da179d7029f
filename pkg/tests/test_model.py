import numpy as np
import pytest

import rtr.tensor as T
from rtr.model import (
    ModelConfig,
    WindowError,
    causal_mask,
    forward,
    init_params,
    param_count,
    patchify,
    streaming_mask,
    unpatchify,
)
from rtr.rng import RngStream
from rtr.tensor import NumericError, ShapeError, Tensor

from _oracles import fd_grad, max_rel_err, rand_params
from _reference import reference_forward

SMALL = ModelConfig(latent_h=4, latent_w=4, width=16, heads=2, layers=2, window=4, vocab=32)


def small_inputs(cfg, B=2, N=3, seed=0, with_ref=True):
    st = RngStream(seed, "test.inputs")
    z_t = st.normal((B, N, cfg.latent_h, cfg.latent_w, 12), dtype=np.float64)
    x = st.normal((B, N, cfg.latent_h, cfg.latent_w, 12), dtype=np.float64)
    t = st.uniform((B, N))
    L = 5
    text = st.normal((B, L, cfg.width), dtype=np.float64)
    text_mask = np.zeros((B, L))
    text_mask[:, -1] = -np.inf  # one pad column
    ref = st.normal((B, cfg.tokens_per_frame, cfg.width), dtype=np.float64) if with_ref else None
    return z_t, x, t, text, text_mask, ref


def as_tensors(*arrays):
    return [Tensor(a, dtype="f64") if a is not None else None for a in arrays]


# -------------------------------------------------------------------- masks

def test_causal_mask_single_frame_all_zero():
    assert (causal_mask(1, 5) == 0.0).all()


def test_causal_mask_n2_k2():
    m = causal_mask(2, 2)
    assert (m[:2, 2:] == -np.inf).all()
    assert (m[:2, :2] == 0.0).all()
    assert (m[2:, :] == 0.0).all()


def test_causal_mask_block_lower_triangular():
    rng = np.random.default_rng(0)
    for _ in range(10):
        n = int(rng.integers(1, 7))
        k = int(rng.integers(1, 7))
        m = causal_mask(n, k)
        for i in range(n * k):
            for j in range(n * k):
                want = 0.0 if j // k <= i // k else -np.inf
                assert m[i, j] == want


def test_streaming_mask_context_fully_visible():
    m = streaming_mask(6, 2, 3)
    assert (m[:, :6] == 0.0).all()
    assert (m[:3, 6 + 3:] == -np.inf).all()


# ------------------------------------------------------- patchify round trip

def test_patchify_token_count():
    cfg = ModelConfig(latent_h=8, latent_w=8, width=16, heads=2, layers=1, window=4)
    params = rand_params(cfg, 1)
    z = Tensor(np.zeros((1, 1, 8, 8, 12)), dtype="f64")
    tok = patchify(z, z, cfg, params)
    assert tok.shape == (1, 16, 16)  # (8/2)^2 = 16 tokens of width D=16


def test_unpatchify_shape_roundtrip():
    cfg = SMALL
    tok = Tensor(np.random.default_rng(1).normal(size=(2, 3 * cfg.tokens_per_frame, cfg.patch_out)), dtype="f64")
    out = unpatchify(tok, 3, cfg)
    assert out.shape == (2, 3, cfg.latent_h, cfg.latent_w, 12)


def test_patchify_with_zero_x_ignores_x_weight_rows():
    cfg = SMALL
    params = rand_params(cfg, 2)
    z = Tensor(np.random.default_rng(3).normal(size=(1, 2, 4, 4, 12)), dtype="f64")
    zero = T.zeros(z.shape, dtype="f64")
    base = patchify(z, zero, cfg, params).numpy()
    # per-pixel channel layout is [z (12) | x (12)]: x rows are idx%24 >= 12
    w2 = params["in.w"].data.copy()
    rows = np.arange(w2.shape[0])
    w2[rows % 24 >= 12] += 7.0
    params["in.w"] = Tensor(w2, dtype="f64", requires_grad=True)
    again = patchify(z, zero, cfg, params).numpy()
    np.testing.assert_array_equal(base, again)


def test_patchify_frame_misalignment_rejected():
    cfg = SMALL
    params = rand_params(cfg, 2)
    a = T.zeros((1, 2, 4, 4, 12), dtype="f64")
    b = T.zeros((1, 3, 4, 4, 12), dtype="f64")
    with pytest.raises(ShapeError):
        patchify(a, b, cfg, params)


# ------------------------------------------------------------------ forward

def test_forward_output_shape_and_determinism():
    cfg = SMALL
    params = rand_params(cfg, 4)
    z_t, x, t, text, text_mask, ref = as_tensors(*small_inputs(cfg)[:4]) + list(small_inputs(cfg)[4:])
    z_t2, x2, t2, text2, mask2, ref2 = small_inputs(cfg)
    v1, _ = forward(params, cfg, z_t, x, t2, text, mask2, ref_tokens=Tensor(ref2, dtype="f64"))
    v2, _ = forward(params, cfg, z_t, x, t2, text, mask2, ref_tokens=Tensor(ref2, dtype="f64"))
    assert v1.shape == z_t.shape
    np.testing.assert_array_equal(v1.numpy(), v2.numpy())


def test_forward_matches_brute_force_reference():
    cfg = SMALL
    params = rand_params(cfg, 5)
    z_t, x, t, text, text_mask, ref = small_inputs(cfg, seed=6)
    for mode in ("causal", "bidirectional"):
        got, _ = forward(
            params, cfg, Tensor(z_t, dtype="f64"), Tensor(x, dtype="f64"), t,
            Tensor(text, dtype="f64"), text_mask, ref_tokens=Tensor(ref, dtype="f64"),
            mode=mode,
        )
        W = {k2: p.data for k2, p in params.items()}
        want = reference_forward(W, cfg, z_t, x, t, text, text_mask, ref_tokens=ref, mode=mode)
        assert max_rel_err(got.numpy(), want) < 1e-5


def test_forward_no_ref_matches_reference():
    cfg = SMALL
    params = rand_params(cfg, 7)
    z_t, x, t, text, text_mask, _ = small_inputs(cfg, seed=8, with_ref=False)
    got, _ = forward(
        params, cfg, Tensor(z_t, dtype="f64"), Tensor(x, dtype="f64"), t,
        Tensor(text, dtype="f64"), text_mask,
    )
    W = {k2: p.data for k2, p in params.items()}
    want = reference_forward(W, cfg, z_t, x, t, text, text_mask)
    assert max_rel_err(got.numpy(), want) < 1e-5


def test_forward_n1_causal_equals_bidirectional_exactly():
    cfg = SMALL
    params = rand_params(cfg, 9)
    z_t, x, t, text, text_mask, ref = small_inputs(cfg, B=1, N=1, seed=10)
    args = (params, cfg, Tensor(z_t, dtype="f64"), Tensor(x, dtype="f64"), t,
            Tensor(text, dtype="f64"), text_mask)
    va, _ = forward(*args, ref_tokens=Tensor(ref, dtype="f64"), mode="causal")
    vb, _ = forward(*args, ref_tokens=Tensor(ref, dtype="f64"), mode="bidirectional")
    np.testing.assert_array_equal(va.numpy(), vb.numpy())


@pytest.mark.parametrize("n_frames", [2, 3, 4])
def test_causal_mode_exact_causality(n_frames):
    cfg = SMALL
    params = rand_params(cfg, 11)
    z_t, x, t, text, text_mask, ref = small_inputs(cfg, B=1, N=n_frames, seed=12)
    base, _ = forward(
        params, cfg, Tensor(z_t, dtype="f64"), Tensor(x, dtype="f64"), t,
        Tensor(text, dtype="f64"), text_mask, ref_tokens=Tensor(ref, dtype="f64"),
        mode="causal",
    )
    rng = np.random.default_rng(13)
    for j in range(1, n_frames):
        z_p = z_t.copy()
        x_p = x.copy()
        z_p[:, j:] += rng.normal(size=z_p[:, j:].shape)
        x_p[:, j:] += rng.normal(size=x_p[:, j:].shape)
        t_p = t.copy()
        t_p[:, j:] = rng.uniform(size=t_p[:, j:].shape)
        out, _ = forward(
            params, cfg, Tensor(z_p, dtype="f64"), Tensor(x_p, dtype="f64"), t_p,
            Tensor(text, dtype="f64"), text_mask, ref_tokens=Tensor(ref, dtype="f64"),
            mode="causal",
        )
        np.testing.assert_array_equal(out.numpy()[:, :j], base.numpy()[:, :j])


def test_bidirectional_mode_noncausality_witness():
    cfg = SMALL
    params = rand_params(cfg, 14)
    z_t, x, t, text, text_mask, _ = small_inputs(cfg, B=1, N=3, seed=15, with_ref=False)
    base, _ = forward(
        params, cfg, Tensor(z_t, dtype="f64"), Tensor(x, dtype="f64"), t,
        Tensor(text, dtype="f64"), text_mask, mode="bidirectional",
    )
    z_p = z_t.copy()
    z_p[:, 2] += 1.0
    out, _ = forward(
        params, cfg, Tensor(z_p, dtype="f64"), Tensor(x, dtype="f64"), t,
        Tensor(text, dtype="f64"), text_mask, mode="bidirectional",
    )
    assert np.abs(out.numpy()[:, 0] - base.numpy()[:, 0]).max() > 1e-12


def test_cross_attention_ignores_pad_positions():
    cfg = SMALL
    params = rand_params(cfg, 16)
    z_t, x, t, text, text_mask, _ = small_inputs(cfg, B=1, N=2, seed=17, with_ref=False)
    base, _ = forward(
        params, cfg, Tensor(z_t, dtype="f64"), Tensor(x, dtype="f64"), t,
        Tensor(text, dtype="f64"), text_mask,
    )
    text2 = text.copy()
    text2[:, -1] += 100.0  # pad column is masked, so this must not matter
    out, _ = forward(
        params, cfg, Tensor(z_t, dtype="f64"), Tensor(x, dtype="f64"), t,
        Tensor(text2, dtype="f64"), text_mask,
    )
    np.testing.assert_array_equal(base.numpy(), out.numpy())


def test_ext_kv_path_matches_joint_forward():
    cfg = SMALL
    params = rand_params(cfg, 18)
    z_t, x, t, text, text_mask, _ = small_inputs(cfg, B=1, N=3, seed=19, with_ref=False)
    joint, _ = forward(
        params, cfg, Tensor(z_t, dtype="f64"), Tensor(x, dtype="f64"), t,
        Tensor(text, dtype="f64"), text_mask, mode="causal",
    )
    # run first two frames jointly, then the third against their cached KV
    _, aux = forward(
        params, cfg, Tensor(z_t[:, :2], dtype="f64"), Tensor(x[:, :2], dtype="f64"),
        t[:, :2], Tensor(text, dtype="f64"), text_mask, mode="causal", capture_kv=True,
    )
    k = cfg.tokens_per_frame
    last, _ = forward(
        params, cfg, Tensor(z_t[:, 2:], dtype="f64"), Tensor(x[:, 2:], dtype="f64"),
        t[:, 2:], Tensor(text, dtype="f64"), text_mask,
        frame_slots=np.array([2]), ext_kv=aux["kv"],
        attn_mask=streaming_mask(2 * k, 1, k),
    )
    assert max_rel_err(last.numpy()[:, 0], joint.numpy()[:, 2]) < 1e-10


def test_window_error():
    cfg = SMALL
    params = rand_params(cfg, 20)
    N = cfg.window + 1
    z = T.zeros((1, N, 4, 4, 12), dtype="f64")
    t = np.zeros((1, N))
    text = T.zeros((1, 2, cfg.width), dtype="f64")
    with pytest.raises(WindowError):
        forward(params, cfg, z, z, t, text, np.zeros((1, 2)))


def test_nonfinite_input_rejected():
    cfg = SMALL
    params = rand_params(cfg, 21)
    z = np.zeros((1, 1, 4, 4, 12))
    z_bad = z.copy()
    z_bad[0, 0, 0, 0, 0] = np.inf
    text = T.zeros((1, 2, cfg.width), dtype="f64")
    with pytest.raises(NumericError):
        forward(params, cfg, Tensor(z_bad, dtype="f64"), Tensor(z, dtype="f64"),
                np.zeros((1, 1)), text, np.zeros((1, 2)))


def test_timestep_out_of_range_rejected():
    cfg = SMALL
    params = rand_params(cfg, 22)
    z = T.zeros((1, 1, 4, 4, 12), dtype="f64")
    text = T.zeros((1, 2, cfg.width), dtype="f64")
    with pytest.raises(ValueError):
        forward(params, cfg, z, z, np.array([[1.5]]), text, np.zeros((1, 2)))


def test_capture_features_mid_block():
    cfg = SMALL
    params = rand_params(cfg, 23)
    z_t, x, t, text, text_mask, _ = small_inputs(cfg, B=2, N=2, seed=24, with_ref=False)
    _, aux = forward(
        params, cfg, Tensor(z_t, dtype="f64"), Tensor(x, dtype="f64"), t,
        Tensor(text, dtype="f64"), text_mask, capture_features=True,
    )
    assert aux["features"].shape == (2, cfg.width)


def test_param_count_default_config():
    cfg = ModelConfig()
    params = init_params(cfg, 0)
    n = param_count(params)
    assert 1_500_000 < n < 3_500_000  # ~2.3M at the default size


def test_init_params_deterministic():
    a = init_params(SMALL, 7)
    b = init_params(SMALL, 7)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)


# ----------------------------------------------------------- gradient oracle

def test_full_model_gradient_matches_fd():
    cfg = ModelConfig(latent_h=4, latent_w=4, width=8, heads=2, layers=2, window=4, vocab=16)
    params = rand_params(cfg, 25, scale=0.1)
    z_t, x, t, text, text_mask, ref = small_inputs(cfg, B=1, N=2, seed=26)
    proj = np.random.default_rng(27).normal(size=(1, 2, 4, 4, 12))

    def loss_fn(z_np, params_):
        with T.Tape() as tape:
            v, _ = forward(
                params_, cfg, Tensor(z_np, dtype="f64"), Tensor(x, dtype="f64"), t,
                Tensor(text, dtype="f64"), text_mask,
                ref_tokens=Tensor(ref, dtype="f64"), mode="causal",
            )
            loss = T.sum_all(T.mul(v, Tensor(proj, dtype="f64")))
        return loss, tape

    # input gradient, full finite-difference sweep
    zt_in = Tensor(z_t, dtype="f64", requires_grad=True)
    with T.Tape() as tape:
        v, _ = forward(
            params, cfg, zt_in, Tensor(x, dtype="f64"), t,
            Tensor(text, dtype="f64"), text_mask,
            ref_tokens=Tensor(ref, dtype="f64"), mode="causal",
        )
        loss = T.sum_all(T.mul(v, Tensor(proj, dtype="f64")))
    T.backward(loss, tape, ensure=params.values())
    num = fd_grad(lambda z_np: loss_fn(z_np, params)[0].item(), z_t)
    assert max_rel_err(zt_in.grad, num) < 1e-3

    # sampled parameter entries across every tensor
    h = 1e-4
    rng = np.random.default_rng(28)
    for name in sorted(params):
        p = params[name]
        flat = p.data.reshape(-1)
        idx = int(rng.integers(flat.size))
        keep = flat[idx]
        flat[idx] = keep + h
        up, _ = loss_fn(z_t, params)
        flat[idx] = keep - h
        dn, _ = loss_fn(z_t, params)
        flat[idx] = keep
        want = (up.item() - dn.item()) / (2 * h)
        got = p.grad.reshape(-1)[idx]
        assert max_rel_err(got, want) < 1e-3, name
