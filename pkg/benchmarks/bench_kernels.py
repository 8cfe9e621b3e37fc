"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py --n 64 --batch 128
"""
import argparse
import timeit

import numpy as np

from cernn import _backend


def _inputs(n, batch, seed=0):
    rng = np.random.default_rng(seed)
    c = lambda *s: rng.standard_normal(s) + 1j * rng.standard_normal(s)
    return c(batch, n), c(3, n), c(2, n), rng.permutation(n).astype(np.int64), c(batch, n)


def bench(mod, n, batch, repeat):
    x, diags, refl, perm, g = _inputs(n, batch)
    _, tape = mod.cascade_forward(x, diags, refl, perm)
    b = np.zeros(n)
    cases = {
        "fft": lambda: mod.fft(x, False),
        "cascade_forward": lambda: mod.cascade_forward(x, diags, refl, perm),
        "cascade_backward": lambda: mod.cascade_backward(g, tape, diags, refl, perm),
        "modrelu_forward": lambda: mod.modrelu_forward(x, b),
        "modrelu_backward": lambda: mod.modrelu_backward(x, b, g),
    }
    out = {}
    for name, fn in cases.items():
        timer = timeit.Timer(fn)
        loops, _ = timer.autorange()
        out[name] = min(timer.repeat(repeat, loops)) / loops * 1e6
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)

    results = {name: bench(_backend.get(name), args.n, args.batch, args.repeat)
               for name in _backend.available()}
    names = list(results)
    print("N=%d batch=%d (microseconds per call, best of %d)" % (args.n, args.batch, args.repeat))
    print("%-18s" % "kernel" + "".join("%12s" % k for k in names) + ("%10s" % "speedup" if len(names) > 1 else ""))
    for kernel in results[names[0]]:
        row = "%-18s" % kernel + "".join("%12.1f" % results[k][kernel] for k in names)
        if len(names) > 1:
            row += "%9.1fx" % (results["python"][kernel] / results["compiled"][kernel])
        print(row)


if __name__ == "__main__":
    main()
