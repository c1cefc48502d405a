"""Bundled deterministic workloads for the benchmark harness."""

from __future__ import annotations

import sys

__all__ = ["busy_loop", "main"]


def busy_loop(iterations: int) -> int:
    """Fixed-work CPU spin; returns a checksum so the loop cannot be
    optimized away."""
    acc = 0
    for i in range(iterations):
        acc = (acc * 1103515245 + i) & 0x7FFFFFFF
    return acc


def main(argv: list[str] | None = None) -> int:
    args = sys.argv[1:] if argv is None else argv
    iterations = int(args[0]) if args else 1_000_000
    print(busy_loop(iterations))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
