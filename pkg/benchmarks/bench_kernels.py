"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import importlib
import timeit

import numpy as np

from stfmerge import _kernels_py


def _compiled():
    try:
        return importlib.import_module("stfmerge._kernels")
    except ImportError:
        return None


def _best(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--eta", type=float, default=0.2)
    args = parser.parse_args(argv)

    compiled = _compiled()
    backends = [("python", _kernels_py)] + ([("cython", compiled)] if compiled else [])
    if compiled is None:
        print("compiled extension not built; timing the fallback only")

    rng = np.random.default_rng(0)
    cases = []
    for size in (4_096, 65_536, 1_048_576, 4_194_304):
        x = rng.standard_normal(size).astype(np.float32)
        k = int(np.ceil(args.eta * size))
        cases.append((f"topk_mask f32 n={size}", lambda b, x=x, k=k: b.topk_magnitude_mask(x, k)))
    x64 = rng.standard_normal(1_048_576)
    cases.append(("topk_mask f64 n=1048576", lambda b: b.topk_magnitude_mask(x64, 209_716)))
    ties = rng.integers(-3, 4, size=1_048_576).astype(np.float32)
    cases.append(("topk_mask ties n=1048576", lambda b: b.topk_magnitude_mask(ties, 300_000)))
    f32 = rng.standard_normal(4_194_304).astype(np.float32)
    bits = _kernels_py.f32_to_bf16(f32)
    cases.append(("f32_to_bf16 n=4194304", lambda b: b.f32_to_bf16(f32)))
    cases.append(("bf16_to_f32 n=4194304", lambda b: b.bf16_to_f32(bits)))

    header = f"{'kernel':<28}" + "".join(f"{name:>12}" for name, _ in backends) + ("     speedup" if compiled else "")
    print(header)
    for label, call in cases:
        times = [_best(lambda b=b: call(b), args.repeat) for _, b in backends]
        row = f"{label:<28}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times)
        if compiled:
            row += f"{times[0] / times[1]:>11.2f}x"
        print(row)


if __name__ == "__main__":
    main()
