"""Time the compiled and numpy OFBENet kernels on the default network shapes.

    python benchmarks/bench_kernels.py [--repeat N] [--batch B]

Prints per-kernel timings for each available backend, the speed-up of the
compiled kernels, and one full forward/backward training step.
"""

import argparse
import statistics
import time

import numpy as np

from accelbias.ofbenet import kernels, network


def timeit(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def kernel_cases(batch, rng):
    # block shapes of the default 3 -> 8 -> 32 -> 64 network on a 3000-sample window
    shapes = [(3000, 3, 8), (749, 8, 32), (186, 32, 64)]
    cases = []
    for T, ci, co in shapes:
        x = rng.normal(size=(batch, T, ci))
        w = rng.normal(size=(5, ci, co))
        b = rng.normal(size=co)
        dz = rng.normal(size=(batch, T - 4, co))
        dy = rng.normal(size=(batch, (T - 4) // 4, co))
        label = f"{ci}->{co} T={T}"
        cases.append((f"conv fwd {label}", lambda k, x=x, w=w, b=b: k.conv1d_forward(x, w, b)))
        cases.append((f"conv bwd {label}", lambda k, x=x, w=w, dz=dz: k.conv1d_backward(x, w, dz, True)))
        cases.append((f"pool fwd {label}", lambda k, dz=dz: k.avg_pool_forward(dz, 4)))
        cases.append((f"pool bwd {label}", lambda k, dy=dy, T=T: k.avg_pool_backward(dy, 4, T - 4)))
    return cases


def train_step(backend, batch, rng):
    cfg = network.NetworkConfig()
    params = network.init_params(cfg, 0)
    x = rng.normal(size=(batch, cfg.window_len, 3))
    mask = np.ones((batch, cfg.hidden))

    def step():
        saved = kernels._impl
        kernels._impl = backend
        try:
            y, trace = network.forward(params, x, cfg, "training", dropout_mask=mask)
            network.backward(params, trace, np.ones_like(y))
        finally:
            kernels._impl = saved

    return step


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=8)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    names = kernels.available_backends()
    backends = {n: kernels.get_backend(n) for n in names}
    print(f"backends: {', '.join(names)} (active: {kernels.BACKEND}); batch {args.batch}, median of {args.repeat}")
    header = f"{'kernel':<28}" + "".join(f"{n:>12}" for n in names) + ("     speed-up" if len(names) > 1 else "")
    print(header)
    rows = kernel_cases(args.batch, rng)
    rows.append(("train step (fwd+bwd)", None))
    for label, fn in rows:
        cells = []
        for n in names:
            f = train_step(backends[n], args.batch, rng) if fn is None else (lambda fn=fn, k=backends[n]: fn(k))
            cells.append(timeit(f, args.repeat))
        line = f"{label:<28}" + "".join(f"{t * 1e3:10.3f}ms" for t in cells)
        if len(cells) > 1:
            line += f"{cells[1] / cells[0]:12.2f}x"
        print(line)


if __name__ == "__main__":
    main()
