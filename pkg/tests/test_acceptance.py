"""Acceptance suite.

Each test prints one PASS/FAIL line per criterion (visible with -s or in
captured output).  Criterion 3's mesh-table total is a documented
source-table inconsistency: the printed total is roughly twice the sum of
the table's own rows, so that single check fails by design with the true
audited numbers; see test_criterion3_gcnn_table_total.
"""

import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import grad_rel_err
from icocnn.engine import mesh_mean_pool, mesh_mean_pool_backward, softmax_cross_entropy
from icocnn.errors import FormatError
from icocnn.experiments import (
    TrainConfig,
    bonferroni_pairwise,
    evaluate,
    one_way_anova,
    permutation_pairwise_p,
    stratified_split,
    summarize,
    train,
    transfer_experiment,
)
from icocnn.icosphere import build_hierarchy, node_count, pooling_groups
from icocnn.model import (
    build_gcnn,
    build_mini_pcnn,
    build_pcnn,
    compare_to_table,
    default_freeze_count,
    load_checkpoint,
    save_checkpoint,
)
from icocnn.sampler import RectangularPatch
from icocnn.surfdata import (
    NoiseSpec,
    Rotation,
    demean,
    load_node_maps,
    project_dataset,
    rotate_map,
    save_node_maps,
    stack_dataset,
    synthesize_dataset,
)


def report(number, ok, detail=""):
    print(f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


# ---------------------------------------------------------------------------
# 1. geometry


def test_criterion1_geometry():
    start = time.perf_counter()
    hierarchy = build_hierarchy(6)
    elapsed = time.perf_counter() - start
    ok = True
    for lv in hierarchy.levels:
        ok &= lv.n_nodes == node_count(lv.level)
        ok &= int((lv.degrees() == 5).sum()) == 12
        ok &= lv.n_nodes - lv.n_edges + lv.n_faces == 2
    ok &= elapsed < 10.0
    assert report(1, ok, f"levels 0-6 in {elapsed:.2f} s")
    globals()["_H6"] = hierarchy  # reused read-only by later criteria


def _hierarchy6():
    if "_H6" not in globals():
        globals()["_H6"] = build_hierarchy(6)
    return globals()["_H6"]


# ---------------------------------------------------------------------------
# 2. pooling groups


def test_criterion2_pooling_groups():
    groups = pooling_groups(_hierarchy6(), 5)
    sizes = groups.sizes()
    ok = groups.n_coarse == 10242
    ok &= set(np.unique(sizes).tolist()) == {6, 7}
    ok &= int((sizes == 6).sum()) == 12
    ok &= int(sizes.sum()) == 10242 + 2 * (40962 - 10242)
    assert report(2, ok, f"10242 groups, size sum {int(sizes.sum())}")


# ---------------------------------------------------------------------------
# 3. parameter audit


def test_criterion3_parameter_rows_and_pcnn_total():
    gcnn = build_gcnn(_hierarchy6(), seed=0)
    rows, _, _ = compare_to_table(gcnn)
    ok = all(okay for _, _, _, okay in rows) and len(rows) == 13
    pcnn = build_pcnn(seed=0)
    p_rows, p_total, p_table = compare_to_table(pcnn)
    ok &= all(okay for _, _, _, okay in p_rows)
    ok &= p_rows[0][2] == 61952  # conv1
    ok &= abs(p_total - p_table) / p_table < 0.05
    assert report(3, ok, "per-row bytes exact; pcnn total within 5%")


def test_criterion3_gcnn_table_total():
    """The mesh table prints a 1.63 MB total, but its own rows sum to
    832088 B (0.83 MB); even reading the total as including a same-size
    gradient buffer leaves a 2.1% gap.  The audit reports the true bytes,
    so this check fails against the printed figure by design."""
    _, total, table_total = compare_to_table(build_gcnn(_hierarchy6(), seed=0))
    rel = abs(total - table_total) / table_total
    ok = rel < 0.02
    report(3, ok, f"gcnn audited total {total} B vs printed {table_total:.0f} B ({rel:.1%})")
    assert ok, (
        f"audited weights-only total {total} B cannot sit within 2% of the "
        f"printed {table_total:.0f} B; the table total is inconsistent with "
        "its own rows (the row figures themselves all match exactly)"
    )


# ---------------------------------------------------------------------------
# 4. gradient suite


def _fd_worst(model, x, labels, h=1e-5):
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
            worst = max(worst, grad_rel_err(grads[name].reshape(-1), fd))
    return worst


def test_criterion4_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    hierarchy = build_hierarchy(2)
    gcnn = build_gcnn(
        hierarchy, patch=RectangularPatch(3, 3), filters_per_conv=4, hidden=8,
        seed=0, start_level=2, end_level=0,
    )
    worst_g = _fd_worst(gcnn, rng.normal(size=(4, 162, 2)), np.array([0, 1, 1, 0]))
    pcnn = build_mini_pcnn(16, 16, seed=0)
    worst_p = _fd_worst(pcnn, rng.normal(size=(3, 16, 16, 2)), np.array([0, 1, 0]))
    elapsed = time.perf_counter() - start
    ok = worst_g < 1e-4 and worst_p < 1e-4 and elapsed < 60.0
    assert report(
        4, ok, f"max rel err mesh {worst_g:.2e}, image {worst_p:.2e}, {elapsed:.1f} s"
    )


# ---------------------------------------------------------------------------
# 5. adjointness


def test_criterion5_pool_adjointness():
    hierarchy = _hierarchy6()
    rng = np.random.default_rng(1)
    ok = True
    details = []
    for coarse, fine in ((2, 3), (5, 6)):
        groups = hierarchy.pooling_groups(coarse)
        n_fine = hierarchy.level(fine).n_nodes
        x = rng.normal(size=(2, n_fine, 3))
        y = rng.normal(size=(2, hierarchy.level(coarse).n_nodes, 3))
        fwd = float(np.sum(mesh_mean_pool(x, groups) * y))
        bwd = float(np.sum(x * mesh_mean_pool_backward(y, groups, n_fine)))
        gap = abs(fwd - bwd) / max(1.0, abs(fwd))
        ok &= gap <= 1e-12
        details.append(f"{fine}->{coarse}: {gap:.2e}")
    assert report(5, ok, "; ".join(details))


# ---------------------------------------------------------------------------
# 6. shape chains


def test_criterion6_shape_chains():
    gcnn = build_gcnn(_hierarchy6(), seed=0)
    shapes = gcnn.shape_chain(1)
    pooled = [shapes[i][1] for i in (0, 4, 8, 12, 16, 20)]
    ok = pooled == [40962, 10242, 2562, 642, 162, 42]
    ok &= all(s[2] == 36 for s in shapes[1:21])
    ok &= shapes[21] == (1, 50) and shapes[24] == (1, 2)

    pcnn = build_pcnn(seed=0)
    p_shapes = pcnn.shape_chain(1)
    spatial = [p_shapes[i][1] for i in (1, 4, 8, 15)]
    ok &= spatial == [54, 27, 13, 6]
    ok &= all(p_shapes[i][1] == 13 for i in (9, 10, 11, 12, 13, 14))
    ok &= p_shapes[16] == (1, 100) and p_shapes[18] == (1, 2)
    assert report(6, ok, "40962->...->42 and 54->27->13->6")


# ---------------------------------------------------------------------------
# 7. training sanity


def _training_sanity_run():
    hierarchy = build_hierarchy(4)
    level = hierarchy.level(4)
    maps = [
        demean(m)
        for m in synthesize_dataset(level, 200, noise_spec=NoiseSpec(), seed=77)
    ]
    x, y = stack_dataset(maps)
    model = build_gcnn(
        hierarchy, patch=RectangularPatch(3, 3), filters_per_conv=8, hidden=16,
        seed=77, start_level=4, end_level=2,
    )
    config = TrainConfig(max_epochs=8, extended_epochs=8, saturation_window=3, seed=77)
    record = train(model, x[:160], y[:160], x[160:], y[160:], config)
    return record


def test_criterion7_training_sanity():
    with threadpool_limits(1):
        first = _training_sanity_run()
        second = _training_sanity_run()
    epochs_to_zero = next(
        (i + 1 for i, e in enumerate(first.train_errors) if e == 0.0), None
    )
    ok = epochs_to_zero is not None and epochs_to_zero <= 40
    ok &= first.train_errors == second.train_errors
    ok &= first.val_errors == second.val_errors
    assert report(
        7, ok, f"100% training accuracy at epoch {epochs_to_zero}; two runs identical"
    )


# ---------------------------------------------------------------------------
# 8. rotation-invariance contrast (calibrated once, then pinned)

ROT_SEED = 2024
ROT_LEVEL = 4
ROT_SAMPLES = 600
GCNN_FILTERS = 16
PCNN_FILTERS = 48
BASE_CONFIG = dict(batch_size=50, max_epochs=12, extended_epochs=16, saturation_window=3)
HEAD_CONFIG = dict(batch_size=50, max_epochs=15, extended_epochs=20, saturation_window=3)
PROJ = dict(width=102, height=102, pad=5)  # 112 x 112 planes


@pytest.mark.slow
def test_criterion8_rotation_contrast():
    start = time.perf_counter()
    hierarchy = build_hierarchy(ROT_LEVEL)
    level = hierarchy.level(ROT_LEVEL)
    maps = synthesize_dataset(level, ROT_SAMPLES, seed=ROT_SEED)
    demeaned = [demean(m) for m in maps]
    x_mesh, y = stack_dataset(demeaned)
    plan = stratified_split(y, k=10, test_fraction=0.1, seed=ROT_SEED)
    fold0 = plan.folds[0]
    base_cfg = TrainConfig(seed=ROT_SEED, **BASE_CONFIG)
    head_cfg = TrainConfig(seed=ROT_SEED, **HEAD_CONFIG)

    gcnn = build_gcnn(
        hierarchy, filters_per_conv=GCNN_FILTERS, hidden=50, seed=ROT_SEED,
        start_level=ROT_LEVEL, end_level=1,
    )
    train(gcnn, x_mesh[fold0.train_idx], y[fold0.train_idx],
          x_mesh[fold0.val_idx], y[fold0.val_idx], base_cfg)
    g_err, _ = evaluate(gcnn, x_mesh[plan.test_idx], y[plan.test_idx])
    gcnn_base = 1.0 - g_err

    images, _ = project_dataset(level, demeaned, **PROJ)
    pcnn = build_pcnn(width=112, height=112, channels=2, seed=ROT_SEED, filters=PCNN_FILTERS)
    train(pcnn, images[fold0.train_idx], y[fold0.train_idx],
          images[fold0.val_idx], y[fold0.val_idx], base_cfg)
    p_err, _ = evaluate(pcnn, images[plan.test_idx], y[plan.test_idx])
    pcnn_base = 1.0 - p_err

    rotation = Rotation.from_axis_angle("z", 90)
    rot_maps = [demean(rotate_map(level, m, rotation)) for m in maps]
    xr_mesh, yr = stack_dataset(rot_maps)
    plan_rot = stratified_split(yr, k=10, test_fraction=0.1, seed=ROT_SEED)

    g_records = transfer_experiment(
        gcnn, xr_mesh, yr, default_freeze_count(gcnn), plan_rot, head_cfg
    )
    gcnn_rot = summarize(g_records)["mean_accuracy"]

    images_rot, _ = project_dataset(level, rot_maps, **PROJ)
    p_records = transfer_experiment(
        pcnn, images_rot, yr, default_freeze_count(pcnn), plan_rot, head_cfg
    )
    pcnn_rot = summarize(p_records)["mean_accuracy"]

    elapsed = time.perf_counter() - start
    gcnn_drop = gcnn_base - gcnn_rot
    pcnn_drop = pcnn_base - pcnn_rot
    ok = 0.82 <= gcnn_base <= 0.99 and 0.80 <= pcnn_base <= 0.99
    ok &= gcnn_drop <= 0.08
    ok &= pcnn_drop >= 0.20 or pcnn_rot <= 0.60
    ok &= elapsed < 1800.0
    assert report(
        8,
        ok,
        f"gcnn {gcnn_base:.3f}->{gcnn_rot:.3f} (drop {gcnn_drop * 100:.1f} pts), "
        f"pcnn {pcnn_base:.3f}->{pcnn_rot:.3f} (drop {pcnn_drop * 100:.1f} pts), "
        f"{elapsed / 60:.1f} min",
    )


# ---------------------------------------------------------------------------
# 9. statistics


def test_criterion9_statistics():
    from icocnn.experiments import _f_sf

    hand = one_way_anova([[1, 2, 3], [2, 3, 4], [3, 4, 5]])
    ok = abs(hand.f_value - 3.0) < 1e-10
    ok &= (hand.df_between, hand.df_within) == (2, 6)
    p_paper = _f_sf(4.472, 2, 27)
    ok &= abs(p_paper - 0.021) < 0.002

    rng = np.random.default_rng(9)
    a = rng.normal(0.87, 0.04, size=10)
    b = rng.normal(0.82, 0.04, size=10)
    (pair,) = bonferroni_pairwise([a, b])
    p_perm = permutation_pairwise_p(a, b, n_resamples=100_000, seed=1)
    ok &= abs(pair.p_raw - p_perm) < 0.01
    assert report(
        9,
        ok,
        f"F=3 exact, p(4.472; 2,27)={p_paper:.4f}, |t-test - permutation|="
        f"{abs(pair.p_raw - p_perm):.4f}",
    )


# ---------------------------------------------------------------------------
# 10. formats


def test_criterion10_formats(tmp_path):
    hierarchy = build_hierarchy(3)
    gcnn = build_gcnn(
        hierarchy, patch=RectangularPatch(3, 3), filters_per_conv=4, hidden=8,
        seed=10, start_level=3, end_level=1,
    )
    rng = np.random.default_rng(10)
    probe = rng.normal(size=(4, 642, 2))
    ckpt = tmp_path / "model.ckpt"
    save_checkpoint(gcnn, ckpt)
    loaded = load_checkpoint(ckpt, hierarchy=hierarchy)
    ckpt_gap = float(np.max(np.abs(gcnn.forward(probe) - loaded.forward(probe))))
    ok = ckpt_gap < 1e-5

    maps = synthesize_dataset(hierarchy.level(2), 4, seed=10)
    data_path = tmp_path / "data.gsrf"
    save_node_maps(data_path, maps)
    back = load_node_maps(data_path)
    data_gap = max(
        float(np.max(np.abs(a.values - b.values))) for a, b in zip(maps, back)
    )
    ok &= data_gap < 1e-5

    rejected = 0
    blob = ckpt.read_bytes()
    for mutant in (blob[: len(blob) // 3], b"ZZZZ" + blob[4:]):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(mutant)
        try:
            load_checkpoint(bad, hierarchy=hierarchy)
        except FormatError:
            rejected += 1
    dblob = data_path.read_bytes()
    for mutant in (dblob[:30], b"ZZZZ" + dblob[4:]):
        bad = tmp_path / "bad.gsrf"
        bad.write_bytes(mutant)
        try:
            load_node_maps(bad)
        except FormatError:
            rejected += 1
    ok &= rejected == 4
    assert report(
        10, ok, f"round-trip gaps {ckpt_gap:.1e} / {data_gap:.1e}; 4/4 corrupt files rejected"
    )
