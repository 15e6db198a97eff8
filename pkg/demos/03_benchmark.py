"""One seed of the synthetic benchmark, end to end.

Generates the default data set, trains all models, selects fills and
thresholds on the tune split, evaluates the test split and prints the
accuracy table. Expect a few minutes per seed on a laptop CPU. The same
run is available as ``regcomp --seed N --out DIR run``.

Run from the repository root::

    python3 demos/03_benchmark.py --seed 0 --out bench0
"""
import argparse
import time

from regcomp.config import RunConfig
from regcomp.evaluation import format_table
from regcomp.pipeline import run_pipeline

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--out", default="bench_out")
args = parser.parse_args()

t0 = time.perf_counter()
result = run_pipeline(RunConfig(seed=args.seed), args.out)
print(format_table(result.rows))
print("\nselected on the tune split:")
for method, sel in result.selection.items():
    fill = f", fill {sel['fill']}" if sel["fill"] else ""
    print(f"  {method:<15} threshold {sel['threshold']:.2f}{fill}")
print(f"\nfinished in {time.perf_counter() - t0:.0f}s, outputs in {result.out_dir}")
