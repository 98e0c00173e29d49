"""Compile the Lenet training spec to a standalone module and train it briefly.

The generated file is written to the current directory and imported back, so
the run below exercises exactly the code a user would ship.
"""

from __future__ import annotations

import importlib.util
import os
import sys

from tensorc import codegen, compiler
from tensorc.runtime.data import synth_data

NETS = os.path.join(os.path.dirname(compiler.__file__), "nets")


def main(iters: int = 20) -> None:
    c = compiler.compile_file(os.path.join(NETS, "lenet_train.net"))
    path = codegen.output_path(c.program, ".")
    with open(path, "w") as f:
        f.write(codegen.emit(c.program, source_file="lenet_train.net"))
    print(f"wrote {path}")

    spec = importlib.util.spec_from_file_location("lenet_gen", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)

    net = mod.Lenet(seed=42)
    data = synth_data(0, 640, (1, 28, 28), 10)
    for i in range(iters):
        X, Y = data.batch(i, 64)
        net.ctx.iteration = i
        loss = net.train_step(X, Y)
        if i % 5 == 0 or i == iters - 1:
            print(f"iteration {i + 1}: loss {loss:.4f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 20)
