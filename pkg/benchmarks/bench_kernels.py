"""Compiled kernels vs numpy fallback, per kernel and end to end.

    python3 benchmarks/bench_kernels.py [--repeat 7] [--json out.json]

Kernel timings call each backend module directly.  The end-to-end rows run
hooked inference on the tiny CNN in a subprocess per backend, because the
backend is fixed at import (``APCSIM_KERNELS``).
"""
from __future__ import annotations

import json
import os
import statistics
import subprocess
import sys
import timeit

import click
import numpy as np

from apcsim import kernels

E2E_SNIPPET = """
import statistics, timeit, numpy as np
from apcsim import kernels
from apcsim.apc import ApcMemory, CounterArray
from apcsim.network import TrainedModel, predict, tiny_cnn_spec
from apcsim.tensor import init_weights
spec = tiny_cnn_spec(); model = TrainedModel(spec, init_weights(spec.layers, 1))
xs = np.random.default_rng(0).random((50, 1, 28, 28)); ca = CounterArray(model)
def hooked():
    m = ApcMemory(len(xs))
    for i, x in enumerate(xs): ca.capture(x, m, str(i))
def plain():
    for x in xs: predict(model, x)
rep = {repeat}
h = statistics.median(timeit.repeat(hooked, number=1, repeat=rep)) / len(xs)
p = statistics.median(timeit.repeat(plain, number=1, repeat=rep)) / len(xs)
print(kernels.BACKEND, p, h)
"""


def kernel_cases(impl):
    rng = np.random.default_rng(0)
    x = rng.random((1, 1, 28, 28))
    w = rng.normal(size=(8, 1, 3, 3))
    b = rng.normal(size=8)
    y = impl.conv2d_forward(x, w, b, 1, 0)
    gy = rng.normal(size=y.shape)
    pooled, index = impl.maxpool2d_forward(np.ascontiguousarray(y), 2, 2)
    act = np.maximum(y, 0).ravel()
    row = np.empty(11)
    line = bytes(rng.integers(32, 127, size=1024, dtype=np.uint8))
    table = rng.random((6, 11))
    kinds = [b"conv2d", b"relu", b"maxpool2d", b"flatten", b"dense", b"softmax"]
    return {
        "conv2d_forward": lambda: impl.conv2d_forward(x, w, b, 1, 0),
        "conv2d_backward": lambda: impl.conv2d_backward(x, w, gy, 1, 0),
        "maxpool2d_forward": lambda: impl.maxpool2d_forward(y, 2, 2),
        "maxpool2d_backward": lambda: impl.maxpool2d_backward(pooled, index, y.shape),
        "layer_row (5408 el.)": lambda: impl.layer_row(act, row, 1, 127, kernels.ENTROPY_ABS, 5408.0, 0.0, 5.4),
        "fnv1a64 (1 KiB)": lambda: impl.fnv1a64(line),
        "format_layers (6 rows)": lambda: impl.format_layers(table, kinds),
    }


def time_us(fn, repeat):
    number = max(1, int(0.02 / max(timeit.timeit(fn, number=1), 1e-7)))
    return statistics.median(timeit.repeat(fn, number=number, repeat=repeat)) / number * 1e6


def end_to_end(backend, repeat):
    env = {**os.environ, "APCSIM_KERNELS": backend}
    out = subprocess.run([sys.executable, "-c", E2E_SNIPPET.format(repeat=repeat)], env=env,
                         capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1]) * 1e6, float(out[2]) * 1e6


@click.command()
@click.option("--repeat", default=7, show_default=True, help="Repetitions; the median is reported.")
@click.option("--json", "json_path", type=click.Path(), help="Also write the results as JSON.")
def main(repeat, json_path):
    backends = kernels.available_backends()
    names = sorted(backends)
    results = {"kernels": {}, "end_to_end": {}}
    click.echo(f"{'kernel (median us)':<26}" + "".join(f"{n:>12}" for n in names) + f"{'speedup':>10}")
    for case in kernel_cases(backends["numpy"]):
        row = {n: time_us(kernel_cases(backends[n])[case], repeat) for n in names}
        results["kernels"][case] = row
        speedup = f"{row['numpy'] / row['cython']:>9.1f}x" if "cython" in row else ""
        click.echo(f"{case:<26}" + "".join(f"{row[n]:>12.2f}" for n in names) + speedup)
    click.echo(f"\n{'tiny CNN per input (us)':<26}{'predict':>12}{'hooked':>12}{'overhead':>10}")
    for n in names:
        active, plain, hooked = end_to_end(n, repeat)
        results["end_to_end"][active] = {"predict_us": plain, "hooked_us": hooked}
        click.echo(f"{active:<26}{plain:>12.1f}{hooked:>12.1f}{(hooked - plain) / plain * 100:>9.0f}%")
    if json_path:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
