#!/usr/bin/env python3
"""Smoke test for the `sgn` Python extension.

Build the extension first, then run this script from the repository root:

    cargo build --release -p sgn-python
    python3 python/smoke_test.py
"""

import math
import os
import shutil
import sys
import tempfile

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_sgn():
    for profile in ("release", "debug"):
        so = os.path.join(REPO, "target", profile, "libsgn.so")
        if os.path.exists(so):
            d = tempfile.mkdtemp(prefix="sgn-py-")
            shutil.copy(so, os.path.join(d, "sgn.so"))
            sys.path.insert(0, d)
            import sgn  # noqa: PLC0415

            return sgn
    sys.exit("libsgn.so not found; run `cargo build --release -p sgn-python` first")


def check(name, cond):
    status = "ok" if cond else "FAIL"
    print(f"  {name}: {status}")
    if not cond:
        sys.exit(1)


def main():
    sgn = import_sgn()

    print("signature graphs")
    # 12x12 map, patch 6 -> 2x2 grid, horizontal chains
    grid_map = [[0.0] * 12 for _ in range(12)]
    grid_map[1][2] = 5.0
    grid_map[3][9] = 4.0
    grid_map[8][1] = 3.0
    grid_map[10][10] = 2.0
    g = sgn.build_graph(grid_map, 6)
    check("4 nodes, 2 edges", g.node_count() == 4 and len(g.edges()) == 2)
    check("node at the bright pixel", g.nodes()[0] == (0, 0, 1, 2))
    check("dump header", g.dump().splitlines()[0] == "mode=h extremum=max patch=6")

    # a 2x6 map with patch 2 is a path of three nodes; the normalized
    # Laplacian spectrum of a 3-path is exactly [0, 1, 2]
    path = sgn.build_graph([[float(i * j % 5) for i in range(6)] for j in range(2)], 2)
    eigs = path.eigenvalues()
    check(
        "path-3 spectrum [0, 1, 2]",
        all(abs(a - b) < 1e-9 for a, b in zip(eigs, [0.0, 1.0, 2.0])),
    )
    vec = path.signature_vector()
    check("signature vector length n*patch", len(vec) == 3 * 2)
    check("lowest eigenvalue zeroes its row", all(abs(v) < 1e-9 for v in vec[:2]))

    lap = path.laplacian("combinatorial")
    check("combinatorial row sums are 0", all(abs(sum(r)) < 1e-12 for r in lap))

    print("model")
    m = sgn.SgnModel(28, 28, 1, 10, seed=0)
    check("classifier width 726", m.classifier_width() == 726)
    zero = [[0.0] * 28 for _ in range(28)]
    emb = m.embed(zero)
    check("embed width matches", len(emb) == 726)
    check("zero image -> zero signature segment", all(v == 0.0 for v in emb[576:]))

    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "model.bin")
        m.save(p)
        m2 = sgn.SgnModel.load(p)
        check("save/load round trip embeds identically", m2.embed(zero) == emb)

    data_dir = os.environ.get("SGN_DATA_DIR", os.path.join(REPO, "data", "mnist"))
    if os.path.isdir(data_dir):
        print("training (512 MNIST rows)")
        metrics = m.train_idx(data_dir, epochs=1, limit_train=512, limit_test=256)
        epoch, loss, acc = metrics[0]
        check("one metrics record", epoch == 1 and math.isfinite(loss))
        check("accuracy in range", 0.0 <= acc <= 1.0)
        check("eval matches training eval", abs(m.eval_idx(data_dir, limit=256) - acc) < 1e-12)
    else:
        print(f"(skipping training: no dataset at {data_dir})")

    print("smoke test passed")


if __name__ == "__main__":
    main()
