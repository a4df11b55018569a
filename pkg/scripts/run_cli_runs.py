"""Run every acceptance configuration through the CLI, once per thread count.

Usage: python scripts/run_cli_runs.py [--out DIR] [--threads 1 4]

Prints the CLI check lines per run and, when several thread counts are given,
whether the output files are byte-identical across them.
"""
import argparse
import json
import sys
from pathlib import Path

from mfbdsde.cli import main as cli_main

HERE = Path(__file__).resolve().parent
RUNS = [
    ("simulate", "c01_martingale.toml"),
    ("simulate", "c02_backward_noise.toml"),
    ("simulate", "c02_backward_noise_tree.toml"),
    ("simulate", "c03_mean_field_linear.toml"),
    ("oracle-check", "c04_oracle.toml"),
    ("simulate", "c05_sign_checks.toml"),
    ("lq-verify", "c06_c07_c08_c10_lq_verify.toml"),
    ("continuation", "c09_continuation_monotone.toml"),
    ("continuation", "c09_continuation_lq.toml"),
]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("runs"))
    parser.add_argument("--threads", type=int, nargs="+", default=[1, 4])
    args = parser.parse_args(argv)
    failures = 0
    for command, name in RUNS:
        digests = []
        for threads in args.threads:
            out = args.out / f"{Path(name).stem}-t{threads}"
            print(f"== {command} {name} threads={threads}")
            code = cli_main([command, "--config", str(HERE / "configs" / name), "--out", str(out),
                             "--threads", str(threads)])
            failures += code != 0
            files = json.loads((out / "manifest.json").read_text())["files"]
            digests.append([(f["name"], f["sha256"]) for f in files])
        if len(digests) > 1:
            same = all(d == digests[0] for d in digests)
            failures += not same
            print(f"{'PASS' if same else 'FAIL'}  outputs identical across threads {args.threads}")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
