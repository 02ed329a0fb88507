"""Built-in verification suites behind the ``verify`` command.

Each check returns (name, passed, detail).  The parameter suite includes
the architecture-table total comparison; the mesh table's printed total
is roughly twice the sum of its own rows, so that one check documents a
known source-table inconsistency rather than a code defect.
"""

from __future__ import annotations

import time

import numpy as np

from .icosphere import build_hierarchy, node_count
from .model import (
    build_gcnn,
    build_mini_pcnn,
    build_pcnn,
    compare_to_table,
)
from .sampler import RectangularPatch

Check = tuple[str, bool, str]


def geometry_suite() -> list[Check]:
    checks: list[Check] = []
    start = time.perf_counter()
    hierarchy = build_hierarchy(6)
    elapsed = time.perf_counter() - start
    for lv in hierarchy.levels:
        ok = lv.n_nodes == node_count(lv.level)
        checks.append(
            (f"level {lv.level} node count", ok, f"{lv.n_nodes} vs 10*4^k+2 = {node_count(lv.level)}")
        )
        degs = lv.degrees()
        checks.append(
            (f"level {lv.level} pentagon count", int((degs == 5).sum()) == 12,
             f"{int((degs == 5).sum())} degree-5 nodes")
        )
        euler = lv.n_nodes - lv.n_edges + lv.n_faces
        checks.append((f"level {lv.level} Euler characteristic", euler == 2, f"V-E+F = {euler}"))
    checks.append(("level 6 build time", elapsed < 10.0, f"{elapsed:.2f} s (budget 10 s)"))

    groups = hierarchy.pooling_groups(5)
    sizes = groups.sizes()
    checks.append(("5->6 group count", groups.n_coarse == 10242, f"{groups.n_coarse} groups"))
    checks.append(
        ("5->6 group sizes", set(np.unique(sizes).tolist()) == {6, 7} and int((sizes == 6).sum()) == 12,
         f"12 of size 6 expected, found {int((sizes == 6).sum())}")
    )
    expected = 10242 + 2 * (40962 - 10242)
    checks.append(
        ("5->6 size sum identity", int(sizes.sum()) == expected, f"{int(sizes.sum())} vs {expected}")
    )
    return checks


def _finite_difference_worst(model, x, labels, h=1e-5, floor=1e-6) -> float:
    from .engine import softmax_cross_entropy

    def loss():
        return softmax_cross_entropy(model.logits(x, train=True), labels)[0]

    model.loss_and_gradients(x, labels, train=True)
    worst = 0.0
    for row in model.rows:
        trainable = row.trainable() if hasattr(row, "trainable") else row.params()
        grads = row.grads()
        for name, arr in trainable.items():
            flat = arr.reshape(-1)
            fd = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = loss()
                flat[i] = orig - h
                lo = loss()
                flat[i] = orig
                fd[i] = (hi - lo) / (2 * h)
            g = grads[name].reshape(-1)
            err = np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd), floor)
            worst = max(worst, float(err))
    return worst


def gradient_suite() -> list[Check]:
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    hierarchy = build_hierarchy(2)
    gcnn = build_gcnn(
        hierarchy, patch=RectangularPatch(3, 3), filters_per_conv=4, hidden=8,
        seed=0, start_level=2, end_level=0,
    )
    worst_g = _finite_difference_worst(
        gcnn, rng.normal(size=(4, 162, 2)), np.array([0, 1, 1, 0])
    )
    pcnn = build_mini_pcnn(16, 16, seed=0)
    worst_p = _finite_difference_worst(
        pcnn, rng.normal(size=(3, 16, 16, 2)), np.array([0, 1, 0])
    )
    elapsed = time.perf_counter() - start
    return [
        ("mesh network gradients", worst_g < 1e-4, f"max relative error {worst_g:.2e}"),
        ("image network gradients", worst_p < 1e-4, f"max relative error {worst_p:.2e}"),
        ("gradient suite runtime", elapsed < 60.0, f"{elapsed:.1f} s (budget 60 s)"),
    ]


def params_suite() -> list[Check]:
    checks: list[Check] = []
    gcnn = build_gcnn(build_hierarchy(6), seed=0)
    rows, total, table_total = compare_to_table(gcnn)
    for row, expected, actual, ok in rows:
        checks.append((f"gcnn row {row} bytes", ok, f"{actual} vs table {expected}"))
    rel = abs(total - table_total) / table_total
    checks.append(
        (
            "gcnn total vs table",
            rel < 0.02,
            f"audited {total} B vs printed {table_total:.0f} B ({rel:.1%} off); the "
            "table's total is about twice the sum of its own rows",
        )
    )
    pcnn = build_pcnn(seed=0)
    rows, total, table_total = compare_to_table(pcnn)
    for row, expected, actual, ok in rows:
        checks.append((f"pcnn row {row} bytes", ok, f"{actual} vs table {expected}"))
    rel = abs(total - table_total) / table_total
    checks.append(("pcnn total vs table", rel < 0.05, f"audited {total} B ({rel:.1%} off)"))
    return checks


SUITES = {
    "geometry": geometry_suite,
    "gradients": gradient_suite,
    "params": params_suite,
}


def run_suites(names) -> list[Check]:
    checks: list[Check] = []
    for name in names:
        checks.extend(SUITES[name]())
    return checks
