"""Compare symbolic gradients with central finite differences at float64.

Runs the same per-primitive checks as the test suite and prints one line per
case.
"""

from __future__ import annotations

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "tests"))

from fdcheck import CASES, run_case  # noqa: E402


def main() -> None:
    for name in CASES:
        errs = run_case(name)
        print(f"{name:20s} max relative error {max(errs.values()):.2e}")


if __name__ == "__main__":
    main()
