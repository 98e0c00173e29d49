"""Print the static memory table for the bundled Lenet in both modes."""

from __future__ import annotations

import os

from tensorc import compiler, memplan

NETS = os.path.join(os.path.dirname(compiler.__file__), "nets")


def main() -> None:
    for mode in ("dealloc", "reuse"):
        c = compiler.compile_file(os.path.join(NETS, "lenet.net"), mode=mode)
        rep = memplan.analyze_program(c.program)
        print(f"== {mode} ==")
        print(memplan.format_table(rep))
        print()


if __name__ == "__main__":
    main()
