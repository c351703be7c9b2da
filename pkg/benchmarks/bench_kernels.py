"""Compiled vs numpy kernels, alone and inside a full training step.

    python benchmarks/bench_kernels.py [--repeat 5]

The per-kernel rows show the speedup of the compiled loops; the last row
shows how little of it survives once the encoder matmuls are included.
"""
import argparse
import timeit

import numpy as np

from shortcutlab import _pykernels, kernels
from shortcutlab import model as M
from shortcutlab import objectives as O
from shortcutlab import tensorops as T

try:
    from shortcutlab import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_cases(rng):
    logits = rng.normal(size=(128, 50))
    labels = rng.integers(0, 50, 128)
    n = 256 * 768
    p, g = rng.normal(size=n), rng.normal(size=n)
    ang = np.sort(rng.uniform(0, 2 * np.pi, 9))
    xs, ys = 16 + 10 * np.cos(ang), 16 + 10 * np.sin(ang)

    def adam(mod):
        m, v = np.zeros(n), np.zeros(n)
        return lambda: mod.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 5e-5, 0.1, 0.001)

    return {
        "softmax_xent 128x50": lambda mod: (lambda: mod.softmax_xent(logits, labels)),
        "softmax_xent_uniform 128x50": lambda mod: (lambda: mod.softmax_xent_uniform(logits)),
        "adam_update 196608": adam,
        "rasterize_polygon 32x32": lambda mod: (lambda: mod.rasterize_polygon(xs, ys, 32, 32)),
    }


def train_step_case(rng, image_size):
    cfg = M.ModelConfig(constraint="IL")
    counts = (50, 12, 4, 5, 3)
    p = M.init_params(cfg, 3 * image_size ** 2, ("shape", "color", "lightness", "texture", "background"),
                      counts, (10, 10))
    src = O.Batch(rng.uniform(-0.5, 0.5, (64, p.input_dim)),
                  np.stack([rng.integers(0, c, 64) for c in counts], axis=1))
    tgt = O.Batch(rng.uniform(-0.5, 0.5, (64, p.input_dim)), rng.integers(0, 10, (64, 2)))
    loss = O.LossConfig(constraint="IL")
    opt = T.Adam(p.tensors, p.trainable(), T.AdamHyper(learning_rate=1e-3))

    def step():
        _, grads = O.value_and_grads(p, src, tgt, loss)
        opt.step(p.tensors, grads)

    return step


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--image-size", type=int, default=16)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy backend is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'case':34s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for name, make in kernel_cases(rng).items():
        t_py = best_of(make(_pykernels), args.repeat, 200)
        t_c = best_of(make(_ckernels), args.repeat, 200)
        print(f"{name:34s} {t_py * 1e6:10.1f} {t_c * 1e6:10.1f} {t_py / t_c:8.2f}")
    step = train_step_case(rng, args.image_size)
    times = {}
    saved = kernels._impl
    try:
        for label, mod in (("numpy", _pykernels), ("cython", _ckernels)):
            kernels._impl = mod
            step()
            times[label] = best_of(step, args.repeat, 5)
    finally:
        kernels._impl = saved
    name = f"train step FactorSRC-IL {args.image_size}x{args.image_size}"
    print(f"{name:34s} {times['numpy'] * 1e6:10.1f} {times['cython'] * 1e6:10.1f} "
          f"{times['numpy'] / times['cython']:8.2f}")


if __name__ == "__main__":
    main()
