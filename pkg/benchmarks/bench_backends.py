"""Compare the compiled and pure-numpy kernel backends.

Times the two hot kernels in isolation and a full prompt-tuning run
end to end. Run from the repository root:

    python3 benchmarks/bench_backends.py
"""

import time

import numpy as np

from promix import backend
from promix.embedspace import SyntheticConfig, generate_synthetic
from promix.head import PromptHead
from promix.losses import LossConfig
from promix.train import OptimizerConfig, tune_prompt


def time_call(fn, repeats: int = 5) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_kernels(name: str) -> dict:
    kernels = backend._load(name)
    rng = np.random.default_rng(0)
    z = rng.uniform(-1, 1, (512, 128)) / 0.01
    s = rng.uniform(-1, 1, (512, 128))
    y = rng.integers(0, 128, 512).astype(np.int64)
    return {
        "softmax_rows(512x128)": time_call(lambda: kernels.softmax_rows(z), 20),
        "prompt_step(512x128)": time_call(lambda: kernels.prompt_step(s, y, 0.01, 5.0), 20),
    }


def bench_tuning(name: str) -> float:
    previous = backend.set_backend(name)
    try:
        domain = generate_synthetic(SyntheticConfig(num_classes=24, shots=16, seed=3))
        init = PromptHead.with_random_context(
            domain.generalized_prototypes, domain.train.class_names, 16, seed=0
        )
        opt = OptimizerConfig(epochs=50, seed=0)
        return time_call(
            lambda: tune_prompt(init, domain.train, LossConfig("ce_conf", w=5.0), opt), 3
        )
    finally:
        backend.set_backend(previous)


def main() -> None:
    names = ["python"]
    try:
        backend._load("compiled")
        names.append("compiled")
    except ImportError:
        print("compiled backend not built; benchmarking the numpy fallback only")

    rows = {}
    for name in names:
        rows[name] = bench_kernels(name)
        rows[name]["tune_prompt(24cls x 16shot, 50 epochs)"] = bench_tuning(name)

    keys = list(next(iter(rows.values())).keys())
    width = max(len(k) for k in keys)
    header = f"{'benchmark':<{width}}  " + "  ".join(f"{n:>12}" for n in names)
    print(header)
    print("-" * len(header))
    for key in keys:
        cells = "  ".join(f"{rows[n][key] * 1e3:>10.3f}ms" for n in names)
        print(f"{key:<{width}}  {cells}")
    if len(names) == 2:
        for key in keys:
            ratio = rows["python"][key] / rows["compiled"][key]
            print(f"speedup {key}: {ratio:.2f}x")


if __name__ == "__main__":
    main()
