"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Reports the best-of-N wall time per call and checks the two backends agree.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from flsim import _kernels_py

try:
    from flsim import _kernels
except ImportError:
    _kernels = None

# (label, x dims [n, C, H, W], out channels, stride)
CONV_CASES = [
    ("mini conv1, batch 16", (16, 15, 8, 8), 8, 1),
    ("mini conv2, batch 16", (16, 8, 8, 8), 8, 2),
    ("dg53 conv1, batch 16", (16, 15, 32, 32), 16, 1),
    ("dg53 conv3, batch 16", (16, 24, 16, 16), 32, 1),
    ("dg53 conv1, batch 64", (64, 15, 32, 32), 16, 1),
]


def best(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def bench(repeat):
    rows = []
    rng = np.random.default_rng(0)
    for label, dims, out_ch, stride in CONV_CASES:
        x = rng.random(dims, dtype=np.float32)
        w = rng.normal(size=(out_ch, dims[1], 3, 3)).astype(np.float32)
        b = np.zeros(out_ch, np.float32)
        args = (stride, stride, 1, 1, 1, 1)
        dout = _kernels_py.conv2d_forward(x, w, b, *args)
        number = max(1, int(2e6 // x.size))
        for op in ("forward", "backward"):
            row = {"case": label, "op": op}
            for name, mod in (("numpy", _kernels_py), ("cython", _kernels)):
                if mod is None:
                    continue
                if op == "forward":
                    fn = lambda m=mod: m.conv2d_forward(x, w, b, *args)
                else:
                    fn = lambda m=mod: m.conv2d_backward(x, w, dout, *args)
                row[name] = best(fn, repeat, number)
            if _kernels is not None:
                ref, got = (_kernels_py.conv2d_forward(x, w, b, *args), _kernels.conv2d_forward(x, w, b, *args)) \
                    if op == "forward" else (_kernels_py.conv2d_backward(x, w, dout, *args)[1],
                                             _kernels.conv2d_backward(x, w, dout, *args)[1])
                row["max_abs_diff"] = float(np.max(np.abs(ref - got)))
            rows.append(row)
    blob = rng.integers(0, 256, 1 << 20, dtype=np.uint8).tobytes()
    row = {"case": "1 MiB payload", "op": "fnv1a_32"}
    for name, mod in (("numpy", _kernels_py), ("cython", _kernels)):
        if mod is not None:
            row[name] = best(lambda m=mod: m.fnv1a_32(blob), repeat, 1)
    rows.append(row)
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="also write the rows to this file")
    args = p.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; timing the numpy fallback only", file=sys.stderr)
    rows = bench(args.repeat)
    print(f"{'case':<24}{'op':<10}{'numpy ms':>12}{'cython ms':>12}{'speedup':>9}")
    for r in rows:
        cy = r.get("cython")
        speed = f"{r['numpy'] / cy:8.2f}x" if cy else "       -"
        cy_txt = f"{1e3 * cy:12.3f}" if cy else f"{'-':>12}"
        print(f"{r['case']:<24}{r['op']:<10}{1e3 * r['numpy']:12.3f}{cy_txt}{speed}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
