#!/usr/bin/env python3
"""File-operation stress experiment over the layered view.

Runs all four scenarios (or a chosen one) and prints the overhead ratio
of the merged view against the bare lower tree.

    python3 scripts/run_file_stress.py --count 10000 --big-bytes 67108864
"""

import argparse
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from cue.bench import STRESS_SCENARIOS, StressSpec, bench_file_stress  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--scenario", choices=list(STRESS_SCENARIOS), default=None,
                        help="default: all four")
    parser.add_argument("--count", type=int, default=10_000)
    parser.add_argument("--size", type=int, default=16)
    parser.add_argument("--big-bytes", type=int, default=64 * 1024 * 1024)
    parser.add_argument("--iterations", type=int, default=3)
    parser.add_argument("--seed", type=int, default=2026)
    args = parser.parse_args()

    scenarios = [args.scenario] if args.scenario else list(STRESS_SCENARIOS)
    with tempfile.TemporaryDirectory(prefix="cue-stress-") as td:
        for scenario in scenarios:
            spec = StressSpec(
                scenario,
                small_count=args.count,
                small_size=args.size,
                big_bytes=args.big_bytes,
                iterations=args.iterations,
                seed=args.seed,
            )
            report = bench_file_stress(spec, workdir=Path(td) / scenario)
            print(
                f"{scenario:12s} overhead {report.overhead_ratio:+.4f}  "
                f"(view {report.summary.mean/1000:.1f} ms vs "
                f"bare {report.baseline_summary.mean/1000:.1f} ms per pass)"
            )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
