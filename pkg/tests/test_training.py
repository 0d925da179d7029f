import os

import numpy as np
import pytest

import rtr.tensor as T
from rtr import synth
from rtr.model import ModelConfig, init_params
from rtr.rng import RngStream
from rtr.tensor import NumericError, Tensor
from rtr.training import (
    ClipStore,
    DivergenceGuard,
    LossLog,
    TimestepSchedule,
    fm_interpolate,
    fm_loss,
    load_train_ckpt,
    sample_teacher,
    train_student_init,
    train_teacher,
)

CFG = ModelConfig(latent_h=8, latent_w=8, width=32, heads=2, layers=2, window=4)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("clips")
    synth.make_dataset(root, 4, 0.5, seed=11, n_frames=10, size=16)
    return str(root), os.path.join(root, "manifest.txt")


@pytest.fixture(scope="module")
def rv2v_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("refclips")
    synth.make_dataset(root, 3, 0.0, seed=12, n_frames=10, size=16)
    return str(root), os.path.join(root, "manifest.txt")


# ------------------------------------------------------------- schedule

def test_schedule_accepts_decreasing_points():
    s = TimestepSchedule((1.0, 0.5))
    assert s.points == (1.0, 0.5) and s.k == 2


def test_schedule_rejects_increasing():
    with pytest.raises(ValueError):
        TimestepSchedule((0.5, 1.0))


def test_schedule_rejects_out_of_range():
    with pytest.raises(ValueError):
        TimestepSchedule((1.0, 0.0))
    with pytest.raises(ValueError):
        TimestepSchedule((1.5,))


def test_schedule_rejects_empty():
    with pytest.raises(ValueError):
        TimestepSchedule(())


def test_schedule_parse():
    assert TimestepSchedule.parse("1.0, 0.5").points == (1.0, 0.5)


# -------------------------------------------------------- interpolation

def test_interpolate_endpoints_exact():
    st = RngStream(0, "test.interp")
    z0 = st.normal((2, 3, 4, 4, 12))
    z1 = st.normal((2, 3, 4, 4, 12))
    assert np.array_equal(fm_interpolate(z0, z1, 0.0), z0)
    assert np.array_equal(fm_interpolate(z0, z1, 1.0), z1)


def test_interpolate_midpoint():
    z0 = np.zeros((1, 2))
    z1 = np.full((1, 2), 2.0)
    assert np.allclose(fm_interpolate(z0, z1, 0.5), 1.0)


def test_interpolate_per_frame_t():
    st = RngStream(1, "test.interp")
    z0 = st.normal((2, 3, 4))
    z1 = st.normal((2, 3, 4))
    t = np.array([[0.0, 1.0, 0.5], [1.0, 0.0, 0.25]])
    out = fm_interpolate(z0, z1, t)
    assert np.array_equal(out[0, 0], z0[0, 0])
    assert np.array_equal(out[0, 1], z1[0, 1])
    assert np.array_equal(out[1, 0], z1[1, 0])


def test_interpolate_tensor_path_matches_numpy_and_differentiates():
    st = RngStream(2, "test.interp")
    z0 = st.normal((2, 3, 4), dtype=np.float64)
    z1 = st.normal((2, 3, 4), dtype=np.float64)
    t = np.array([[0.3, 0.7, 0.5], [0.1, 0.9, 0.2]])
    a = Tensor(z0, requires_grad=True)
    with T.Tape() as tape:
        out = fm_interpolate(a, Tensor(z1), t)
        loss = T.sum_all(out)
    T.backward(loss, tape)
    assert np.allclose(out.numpy(), fm_interpolate(z0, z1, t))
    # d/dz0 sum((1-t) z0 + t z1) = (1-t) broadcast over trailing dim
    assert np.allclose(a.grad, np.repeat((1.0 - t)[:, :, None], 4, axis=2))


# ----------------------------------------------------------------- loss

def test_fm_loss_zero_when_v_is_target():
    st = RngStream(3, "test.loss")
    z0 = Tensor(st.normal((2, 5)))
    z1 = Tensor(st.normal((2, 5)))
    v = T.sub(z1, z0)
    assert fm_loss(v, z0, z1).item() == 0.0


def test_fm_loss_closed_form_at_zero_velocity():
    st = RngStream(4, "test.loss")
    z0 = st.normal((3, 7), dtype=np.float64)
    z1 = st.normal((3, 7), dtype=np.float64)
    v = Tensor(np.zeros_like(z0))
    loss = fm_loss(v, Tensor(z0), Tensor(z1))
    assert np.isclose(loss.item(), np.mean((z1 - z0) ** 2), rtol=1e-12)


def test_fm_loss_gradient_matches_fd():
    st = RngStream(5, "test.loss")
    z_t = st.normal((2, 6), dtype=np.float64)
    z0 = st.normal((2, 6), dtype=np.float64)
    z1 = st.normal((2, 6), dtype=np.float64)
    w0 = st.normal((6, 6), dtype=np.float64) * 0.3

    def loss_at(w_arr):
        v = np.asarray(z_t) @ w_arr
        return np.mean((v - (z1 - z0)) ** 2)

    w = Tensor(w0, requires_grad=True)
    with T.Tape() as tape:
        v = T.matmul(Tensor(z_t), w)
        loss = fm_loss(v, Tensor(z0), Tensor(z1))
    T.backward(loss, tape)
    h = 1e-5
    for idx in [(0, 0), (2, 3), (5, 5)]:
        wp = w0.copy()
        wp[idx] += h
        wm = w0.copy()
        wm[idx] -= h
        fd = (loss_at(wp) - loss_at(wm)) / (2 * h)
        assert np.isclose(w.grad[idx], fd, rtol=1e-5, atol=1e-9)


# -------------------------------------------------------------- sampler

def test_sampler_single_step_is_extrapolation():
    st = RngStream(6, "test.sampler")
    z1 = st.normal((1, 2, 4, 4, 12))
    v_fixed = st.normal((1, 2, 4, 4, 12))
    out = sample_teacher(lambda z, t: v_fixed, z1, 1)
    assert np.allclose(out, z1 - v_fixed)


def test_sampler_output_shape():
    z1 = np.zeros((2, 3, 4, 4, 12), dtype=np.float32)
    out = sample_teacher(lambda z, t: np.zeros_like(z), z1, 4)
    assert out.shape == z1.shape


def test_sampler_analytic_flow_recovers_data_any_step_count():
    st = RngStream(7, "test.sampler")
    z0 = st.normal((2, 8), dtype=np.float64)
    z1 = st.normal((2, 8), dtype=np.float64)
    for n in (1, 2, 5, 16):
        rec = sample_teacher(lambda z, t: z1 - z0, z1, n)
        assert np.allclose(rec, z0, atol=1e-12), n


def test_sampler_rejects_zero_steps():
    with pytest.raises(ValueError):
        sample_teacher(lambda z, t: z, np.zeros((1, 1)), 0)


# ------------------------------------------------------ divergence guard

def test_guard_trips_after_patience():
    guard = DivergenceGuard(patience=5)
    guard.check(0, 1.0)
    for i in range(4):
        guard.check(i + 1, 20.0)
    with pytest.raises(RuntimeError, match="diverged"):
        guard.check(5, 20.0)


def test_guard_resets_on_recovery():
    guard = DivergenceGuard(patience=3)
    guard.check(0, 1.0)
    guard.check(1, 20.0)
    guard.check(2, 20.0)
    guard.check(3, 2.0)
    guard.check(4, 20.0)
    guard.check(5, 20.0)


def test_guard_rejects_non_finite():
    guard = DivergenceGuard()
    with pytest.raises(NumericError):
        guard.check(0, float("nan"))


# ------------------------------------------------------------- teacher

def test_teacher_runs_and_logs(dataset, tmp_path):
    root, manifest = dataset
    log = tmp_path / "loss.csv"
    params, _ = train_teacher(root, manifest, CFG, steps=3, batch_size=2,
                              seed=5, log_path=str(log))
    lines = log.read_text().strip().splitlines()
    assert lines[0] == "step,loss_name,value"
    assert len(lines) == 4
    for i, line in enumerate(lines[1:]):
        step, name, value = line.split(",")
        assert int(step) == i and name == "fm_loss"
        assert np.isfinite(float(value))


def test_teacher_deterministic_across_runs(dataset, tmp_path):
    root, manifest = dataset
    outs = []
    for run in range(2):
        log = tmp_path / f"loss{run}.csv"
        params, _ = train_teacher(root, manifest, CFG, steps=3, batch_size=2,
                                  seed=9, log_path=str(log))
        outs.append((log.read_text(), params))
    assert outs[0][0] == outs[1][0]
    for name in outs[0][1]:
        assert np.array_equal(outs[0][1][name].data, outs[1][1][name].data), name


def test_teacher_rv2v_only_batches(rv2v_dataset):
    root, manifest = rv2v_dataset
    params, _ = train_teacher(root, manifest, CFG, steps=2, batch_size=2, seed=3)
    assert all(np.all(np.isfinite(p.data)) for p in params.values())


def test_teacher_resume_bit_exact(dataset, tmp_path):
    root, manifest = dataset
    ck = tmp_path / "teacher.rtrc"
    direct, _ = train_teacher(root, manifest, CFG, steps=6, batch_size=2, seed=21)
    # interrupt a 6-step plan after 3 steps; the lr schedule follows the plan
    train_teacher(root, manifest, CFG, steps=6, stop_after=3, batch_size=2,
                  seed=21, out_ckpt=str(ck))
    cfg2, params, opt_arrays, meta = load_train_ckpt(str(ck))
    assert cfg2 == CFG and meta["stage"] == 1 and meta["step"] == 3
    resumed, _ = train_teacher(root, manifest, cfg2, steps=6, batch_size=2,
                               seed=21, params=params, start_step=meta["step"],
                               opt_state=opt_arrays)
    for name in direct:
        assert np.array_equal(direct[name].data, resumed[name].data), name


# ------------------------------------------------------------- student

def test_student_starts_from_teacher_weights(dataset):
    root, manifest = dataset
    teacher = init_params(CFG, seed=1)
    before = {k: p.data.copy() for k, p in teacher.items()}
    student, _ = train_student_init(root, manifest, CFG, teacher, steps=0, seed=2)
    for name in before:
        assert np.array_equal(student[name].data, before[name])
        assert student[name] is not teacher[name]


def test_student_init_trains_and_logs(dataset, tmp_path):
    root, manifest = dataset
    teacher = init_params(CFG, seed=1)
    log = tmp_path / "s.csv"
    student, _ = train_student_init(root, manifest, CFG, teacher, steps=3,
                                    batch_size=2, seed=4, log_path=str(log))
    lines = log.read_text().strip().splitlines()[1:]
    assert len(lines) == 3
    assert all(line.split(",")[1] == "student_fm_loss" for line in lines)
    changed = sum(
        0 if np.array_equal(student[k].data, teacher[k].data) else 1
        for k in teacher)
    assert changed > 0


def test_student_resume_bit_exact(dataset, tmp_path):
    root, manifest = dataset
    teacher = init_params(CFG, seed=1)
    ck = tmp_path / "student.rtrc"
    direct, _ = train_student_init(root, manifest, CFG, teacher, steps=4,
                                   batch_size=2, seed=13)
    train_student_init(root, manifest, CFG, teacher, steps=4, stop_after=2,
                       batch_size=2, seed=13, out_ckpt=str(ck))
    cfg2, params, opt_arrays, meta = load_train_ckpt(str(ck))
    assert meta["stage"] == 2
    resumed, _ = train_student_init(root, manifest, cfg2, teacher, steps=4,
                                    batch_size=2, seed=13, params=params,
                                    start_step=meta["step"],
                                    opt_state=opt_arrays)
    for name in direct:
        assert np.array_equal(direct[name].data, resumed[name].data), name


# ------------------------------------------------------------ clip store

def test_clip_store_caches_and_modes(dataset):
    root, manifest = dataset
    samples = synth.load_manifest(manifest)
    store = ClipStore(root, samples)
    assert set(store.by_mode) == {"tv2v", "rv2v"}
    assert sorted(store.by_mode["tv2v"] + store.by_mode["rv2v"]) == list(range(len(samples)))
    z = store.target_latents(0)
    assert z.shape[1:] == (8, 8, 12)
    assert store.target_latents(0) is z  # cached


def test_loss_log_appends(tmp_path):
    path = tmp_path / "l.csv"
    log = LossLog(str(path))
    log.log(0, "a", 1.5)
    log.log(1, "b", 2.0)
    lines = path.read_text().strip().splitlines()
    assert lines == ["step,loss_name,value", "0,a,1.5", "1,b,2"]
