"""Compare the numba and numpy kernel paths.

Kernel timings call both implementations directly in one process, on the
shapes the MNIST networks see at batch size 256.  The end-to-end timings run
one pretraining minibatch step in a fresh interpreter per backend, selected
through ``DDRID_DISABLE_NUMBA`` exactly as a user would.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 256] [--skip-step]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from ddrid.nn import kernels

STEP_SCRIPT = """
import json, time, numpy as np
from ddrid.data import ImageDataset
from ddrid.nn import kernels
from ddrid.nn.layers import standard_specs
from ddrid.train import TrainConfig, pretrain
x = np.random.default_rng(0).random(({batch}, 1, 32, 32)).astype(np.float32)
data = ImageDataset(x, np.zeros({batch}, int))
cfg = TrainConfig(batch_size={batch}, pretrain_epochs=1, finetune_epochs=1)
specs = standard_specs("mnist")
pretrain(data, cfg, specs)  # warm-up, includes jit compilation or cache load
times = []
for _ in range({repeat}):
    t0 = time.perf_counter()
    pretrain(data, cfg, specs)
    times.append(time.perf_counter() - t0)
print(json.dumps({{"backend": kernels.backend(), "best": min(times)}}))
"""


def kernel_cases(batch: int, rng: np.random.Generator):
    """(name, numba call, numpy call) triples over realistic shapes."""
    cases = []
    for label, (h, c) in {"conv1": (32, 1), "conv2": (16, 64), "conv3": (8, 128)}.items():
        ho = h // 2
        xp = rng.random((batch, h + 2, h + 2, c)).astype(np.float32)
        cols = kernels.im2col_numpy(xp, 4, 2, ho, ho)
        cases.append((f"im2col {label}", lambda xp=xp, ho=ho: kernels.im2col_numba(xp, 4, 2, ho, ho),
                      lambda xp=xp, ho=ho: kernels.im2col_numpy(xp, 4, 2, ho, ho)))
        args = (cols, batch, h + 2, h + 2, 4, 2, ho, ho)
        cases.append((f"col2im {label}", lambda a=args: kernels.col2im_numba(*a),
                      lambda a=args: kernels.col2im_numpy(*a)))
    act = rng.normal(size=(batch, 8, 8, 128)).astype(np.float32)
    cases.append(("leaky_relu", lambda: kernels.leaky_relu_numba(act, 0.2), lambda: kernels.leaky_relu_numpy(act, 0.2)))
    cases.append(("leaky_relu_grad", lambda: kernels.leaky_relu_grad_numba(act, act, 0.2),
                  lambda: kernels.leaky_relu_grad_numpy(act, act, 0.2)))
    rows = act.reshape(-1, 128)
    inv = np.ones(128, np.float32)
    cases.append(("bn_stats", lambda: kernels.bn_stats_numba(rows), lambda: kernels.bn_stats_numpy(rows)))
    cases.append(("bn_backward", lambda: kernels.bn_backward_numba(rows, rows, inv),
                  lambda: kernels.bn_backward_numpy(rows, rows, inv)))
    return cases


def best_of(fn, repeat: int) -> float:
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run_step(disable_numba: bool, batch: int, repeat: int) -> dict:
    env = dict(os.environ, **{kernels.ENV_FLAG: "1" if disable_numba else "0"})
    proc = subprocess.run([sys.executable, "-c", STEP_SCRIPT.format(batch=batch, repeat=repeat)],
                          env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--batch", type=int, default=256)
    parser.add_argument("--skip-step", action="store_true", help="kernel timings only")
    args = parser.parse_args(argv)
    if not kernels.NUMBA_AVAILABLE:
        print("numba is not installed; nothing to compare")
        return 1

    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, fast, slow in kernel_cases(args.batch, rng):
        np.testing.assert_allclose(np.asarray(fast()[0] if name == "bn_stats" else fast()),
                                   np.asarray(slow()[0] if name == "bn_stats" else slow()), rtol=1e-4, atol=1e-4)
        t_fast, t_slow = best_of(fast, args.repeat), best_of(slow, args.repeat)
        print(f"{name:<18}{t_fast * 1e3:>10.2f}{t_slow * 1e3:>10.2f}{t_slow / t_fast:>8.2f}x")

    if not args.skip_step:
        print(f"\none pretraining step on {args.batch} images (both autoencoders, forward and backward)")
        results = [run_step(flag, args.batch, max(1, args.repeat // 2)) for flag in (False, True)]
        for r in results:
            print(f"  {r['backend']:<6} {r['best']:.3f} s")
        print(f"  speedup {results[1]['best'] / results[0]['best']:.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
