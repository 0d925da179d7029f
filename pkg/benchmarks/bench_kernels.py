"""Time the numba kernel lane against the pure-numpy lane.

Micro benchmarks cover each hot kernel at streaming-session shapes, then an
end-to-end per-frame timing runs in subprocesses so each lane binds cleanly
at import. Usage:

    python benchmarks/bench_kernels.py [--repeats 30] [--skip-e2e]
"""

import argparse
import statistics
import subprocess
import sys
import time

import numpy as np

from rtr.kernels import numba_lane, numpy_lane

# shapes from the default toy model under a full window: 8 frames x 64
# tokens of width 64, mlp hidden 256, ~340k parameters
ROWS, COLS = 2048, 512
NORM = (1024, 64)
MLP = (1024, 256)
N_PARAMS = 340_000


def make_cases(rng):
    attn = rng.normal(size=(ROWS, COLS)).astype(np.float32)
    attn[:, -7:] = -np.inf
    y, _ = numpy_lane()["masked_softmax_fwd"](attn)
    g_attn = rng.normal(size=(ROWS, COLS)).astype(np.float32)
    x_norm = rng.normal(size=NORM).astype(np.float32)
    _, mean, rstd = numpy_lane()["layer_norm_fwd"](x_norm, 1e-5)
    g_norm = rng.normal(size=NORM).astype(np.float32)
    x_mlp = rng.normal(size=MLP).astype(np.float32)
    g_mlp = rng.normal(size=MLP).astype(np.float32)
    adam = [rng.normal(size=N_PARAMS).astype(np.float32) for _ in range(3)]
    adam.append(np.abs(rng.normal(size=N_PARAMS)).astype(np.float32))  # v >= 0
    return {
        "masked_softmax_fwd": lambda k: k(attn),
        "softmax_bwd": lambda k: k(y, g_attn),
        "layer_norm_fwd": lambda k: k(x_norm, 1e-5),
        "layer_norm_bwd": lambda k: k(x_norm, mean, rstd, g_norm),
        "gelu_fwd": lambda k: k(x_mlp),
        "gelu_bwd": lambda k: k(x_mlp, g_mlp),
        "adam_step": lambda k: k(adam[0], adam[1], adam[2], adam[3],
                                 1e-4, 0.9, 0.999, 1e-8, 0.5, 0.7),
    }


def bench(call, kernel, repeats):
    call(kernel)  # warmup (and JIT, on the numba lane)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        call(kernel)
        times.append(time.perf_counter() - t0)
    return statistics.median(times) * 1e3


E2E_SNIPPET = """
import time
import numpy as np
from rtr.kernels import BACKEND
from rtr.model import ModelConfig, init_params
from rtr.rng import RngStream
from rtr.stream import make_session

cfg = ModelConfig(latent_h=16, latent_w=16, width=64, heads=4, layers=4, window=8)
params = init_params(cfg, seed=0)
for p in params.values():
    p.requires_grad = False
sess = make_session(params, cfg, "tv2v", [1], seed=0)
src = RngStream(1, "bench").uniform((40, 32, 32, 3)).astype(np.float32)
for f in src[:10]:
    sess.process_frame(f)
t0 = time.perf_counter()
for f in src[10:]:
    sess.process_frame(f)
ms = (time.perf_counter() - t0) / 30 * 1e3
print(f"{BACKEND}: {ms:.1f} ms/frame")
"""


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=30)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()

    lanes = {"numpy": numpy_lane()}
    try:
        lanes["numba"] = numba_lane()
    except ImportError:
        print("numba not importable; timing the numpy lane only")

    cases = make_cases(np.random.default_rng(0))
    width = max(len(n) for n in cases)
    header = f"{'kernel':<{width}}  " + "".join(f"{n + ' ms':>12}" for n in lanes)
    if len(lanes) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for name, call in cases.items():
        ms = [bench(call, lane[name], args.repeats) for lane in lanes.values()]
        row = f"{name:<{width}}  " + "".join(f"{m:>12.3f}" for m in ms)
        if len(ms) == 2:
            row += f"{ms[0] / ms[1]:>9.1f}x"
        print(row)

    if not args.skip_e2e:
        print("\nend-to-end session, default toy model, 30 frames:")
        for flag in ("0", "1") if "numba" in lanes else ("0",):
            out = subprocess.run(
                [sys.executable, "-c", E2E_SNIPPET],
                env={"RTR_NUMBA": flag, "PATH": "/usr/bin:/bin"},
                capture_output=True, text=True)
            print(" ", (out.stdout.strip() or out.stderr.strip()))


if __name__ == "__main__":
    main()
