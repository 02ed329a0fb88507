import numpy as np
import pytest

from icocnn.errors import ConfigError, DataError
from icocnn.experiments import (
    TrainConfig,
    bonferroni_pairwise,
    cross_validate,
    evaluate,
    one_way_anova,
    permutation_pairwise_p,
    stratified_split,
    summarize,
    train,
    transfer_experiment,
)
from icocnn.model import build_gcnn
from icocnn.sampler import RectangularPatch
from icocnn.surfdata import (
    NoiseSpec,
    Rotation,
    demean,
    rotate_map,
    stack_dataset,
    synthesize_dataset,
)


def mini_builder(hierarchy, level=2, filters=4, hidden=8):
    def build(seed):
        return build_gcnn(
            hierarchy,
            patch=RectangularPatch(3, 3),
            filters_per_conv=filters,
            hidden=hidden,
            seed=seed,
            start_level=level,
            end_level=0,
        )

    return build


@pytest.fixture(scope="module")
def small_data(hierarchy3):
    lv = hierarchy3.level(2)
    maps = [demean(m) for m in synthesize_dataset(lv, 60, seed=42)]
    return stack_dataset(maps)


def quick_config(**kw):
    base = dict(batch_size=10, max_epochs=6, extended_epochs=8, saturation_window=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# splitting


def test_stratified_split_paper_shape():
    rng = np.random.default_rng(0)
    labels = np.array([0] * 328 + [1] * 405)
    labels = labels[rng.permutation(labels.size)]
    plan = stratified_split(labels, k=10, test_fraction=63 / 733, seed=1)
    assert plan.test_idx.size == 63
    test_labels = labels[plan.test_idx]
    assert int((test_labels == 0).sum()) == 28
    assert int((test_labels == 1).sum()) == 35

    trainval = np.setdiff1d(np.arange(733), plan.test_idx)
    seen = np.concatenate([f.val_idx for f in plan.folds])
    assert np.array_equal(np.sort(seen), trainval)  # folds partition train-val
    global_ratio = (labels[trainval] == 0).mean()
    for fold in plan.folds:
        fold_labels = labels[fold.val_idx]
        # class counts stay within one sample of the proportional share
        assert abs((fold_labels == 0).sum() - global_ratio * fold_labels.size) <= 1.0
        assert np.intersect1d(fold.train_idx, fold.val_idx).size == 0
        assert np.intersect1d(fold.val_idx, plan.test_idx).size == 0


def test_stratified_split_validation():
    with pytest.raises(ConfigError):
        stratified_split(np.zeros(50, dtype=int), k=5, test_fraction=0.1)
    with pytest.raises(ConfigError):
        stratified_split(np.arange(10) % 2, k=1, test_fraction=0.1)
    with pytest.raises(ConfigError):
        stratified_split(np.array([0] * 30 + [1] * 3), k=5, test_fraction=0.2)


def test_stratified_split_deterministic():
    labels = np.arange(40) % 2
    a = stratified_split(labels, k=4, test_fraction=0.25, seed=9)
    b = stratified_split(labels, k=4, test_fraction=0.25, seed=9)
    assert np.array_equal(a.test_idx, b.test_idx)
    for fa, fb in zip(a.folds, b.folds):
        assert np.array_equal(fa.val_idx, fb.val_idx)


# ---------------------------------------------------------------------------
# training


def test_zero_learning_rate_is_noop(hierarchy3, small_data):
    x, y = small_data
    model = mini_builder(hierarchy3)(seed=3)
    before = model.snapshot()
    config = quick_config(lr_initial=0.0, lr_fine=0.0, shuffle=False)
    record = train(model, x[:40], y[:40], x[40:], y[40:], config)
    after = model.snapshot()
    for b, a in zip(before, after):
        for name in b:
            if name in ("running_mean", "running_var"):
                continue  # statistics are state, not parameters
            assert np.array_equal(b[name], a[name]), name
    assert len(set(record.train_errors)) == 1  # constant error curve


def test_training_reaches_zero_error_on_separable_data(hierarchy3):
    lv = hierarchy3.level(2)
    maps = [demean(m) for m in synthesize_dataset(lv, 40, noise_spec=NoiseSpec(), seed=7)]
    x, y = stack_dataset(maps)
    model = mini_builder(hierarchy3)(seed=1)
    config = TrainConfig(batch_size=10, max_epochs=40, extended_epochs=40,
                         saturation_window=5, seed=1)
    record = train(model, x[:30], y[:30], x[30:], y[30:], config)
    assert min(record.train_errors) == 0.0
    assert record.val_errors[record.chosen_epoch - 1] == min(record.val_errors)


def test_early_stopping_restores_best_epoch(hierarchy3, small_data):
    x, y = small_data
    model = mini_builder(hierarchy3)(seed=5)
    record = train(model, x[:40], y[:40], x[40:], y[40:], quick_config(seed=5))
    # the returned model reproduces the recorded best validation error
    err, _ = evaluate(model, x[40:], y[40:])
    assert err == min(record.val_errors)
    assert record.chosen_epoch == int(np.argmin(record.val_errors)) + 1


def test_training_deterministic(hierarchy3, small_data):
    x, y = small_data
    r1 = train(mini_builder(hierarchy3)(seed=2), x[:40], y[:40], x[40:], y[40:], quick_config(seed=2))
    r2 = train(mini_builder(hierarchy3)(seed=2), x[:40], y[:40], x[40:], y[40:], quick_config(seed=2))
    assert r1.train_errors == r2.train_errors
    assert r1.val_errors == r2.val_errors
    assert r1.chosen_epoch == r2.chosen_epoch


def test_training_epoch_budget(hierarchy3, small_data):
    x, y = small_data
    config = quick_config(max_epochs=3, extended_epochs=10, saturation_window=1, seed=0)
    record = train(mini_builder(hierarchy3)(seed=0), x[:40], y[:40], x[40:], y[40:], config)
    assert 3 <= len(record.val_errors) <= 10


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(lr_fine=0.05, lr_initial=0.02)
    with pytest.raises(ConfigError):
        TrainConfig(lr_fine=0.0, lr_initial=0.02)
    with pytest.raises(ConfigError):
        TrainConfig(max_epochs=50, extended_epochs=40)


# ---------------------------------------------------------------------------
# cross-validation


def test_cross_validate_records(hierarchy3, small_data):
    x, y = small_data
    plan = stratified_split(y, k=3, test_fraction=0.2, seed=4)
    records = cross_validate(mini_builder(hierarchy3), x, y, plan, quick_config(seed=4))
    assert [r.fold for r in records] == [0, 1, 2]
    for r in records:
        assert 0.0 <= r.test_accuracy <= 1.0
        assert np.array(r.confusion).sum() == plan.test_idx.size

    again = cross_validate(mini_builder(hierarchy3), x, y, plan, quick_config(seed=4))
    for a, b in zip(records, again):
        assert a.train_errors == b.train_errors
        assert a.test_accuracy == b.test_accuracy


def test_cross_validate_fold_order_permutes_records(hierarchy3, small_data):
    from dataclasses import replace

    x, y = small_data
    plan = stratified_split(y, k=3, test_fraction=0.2, seed=4)
    reordered = replace(plan, folds=[plan.folds[2], plan.folds[0], plan.folds[1]])
    base = cross_validate(mini_builder(hierarchy3), x, y, plan, quick_config(seed=4))
    perm = cross_validate(mini_builder(hierarchy3), x, y, reordered, quick_config(seed=4))
    assert [r.fold for r in perm] == [2, 0, 1]
    by_fold = {r.fold: r for r in base}
    for r in perm:
        assert r.test_accuracy == by_fold[r.fold].test_accuracy
        assert r.train_errors == by_fold[r.fold].train_errors


def test_summarize():
    from icocnn.experiments import RunRecord

    records = [
        RunRecord(0, 0, [], [], 1, 0.8, None, 0.0, "x"),
        RunRecord(1, 1, [], [], 1, 0.9, None, 0.0, "x"),
    ]
    s = summarize(records)
    assert abs(s["mean_accuracy"] - 0.85) < 1e-15
    assert abs(s["std_accuracy"] - np.std([0.8, 0.9], ddof=1)) < 1e-15


# ---------------------------------------------------------------------------
# transfer


def test_transfer_identity_rotation_matches_plain_head_retraining(hierarchy3, small_data):
    x, y = small_data
    lv = hierarchy3.level(2)
    base = mini_builder(hierarchy3)(seed=6)
    plan = stratified_split(y, k=2, test_fraction=0.2, seed=6)
    config = quick_config(seed=6)
    train(base, x[plan.folds[0].train_idx], y[plan.folds[0].train_idx],
          x[plan.folds[0].val_idx], y[plan.folds[0].val_idx], config)

    freeze = len(base.rows) - 5
    maps = synthesize_dataset(lv, 60, seed=42)
    rotated = [demean(rotate_map(lv, m, Rotation.identity())) for m in maps]
    xr, yr = stack_dataset(rotated)
    assert np.array_equal(xr, x)  # identity rotation is exact

    rec_orig = transfer_experiment(base, x, y, freeze, plan, config)
    rec_rot = transfer_experiment(base, xr, yr, freeze, plan, config)
    for a, b in zip(rec_orig, rec_rot):
        assert a.test_accuracy == b.test_accuracy
        assert a.train_errors == b.train_errors


def test_transfer_trains_only_head(hierarchy3, small_data):
    x, y = small_data
    base = mini_builder(hierarchy3)(seed=8)
    plan = stratified_split(y, k=2, test_fraction=0.2, seed=8)
    freeze = len(base.rows) - 5
    before = base.snapshot()
    transfer_experiment(base, x, y, freeze, plan, quick_config(seed=8))
    after = base.snapshot()
    for i in range(freeze):
        for name in before[i]:
            assert np.array_equal(before[i][name], after[i][name])
    assert all(row.frozen for row in base.rows[:freeze])


def test_transfer_rejects_full_freeze(hierarchy3, small_data):
    x, y = small_data
    base = mini_builder(hierarchy3)(seed=8)
    plan = stratified_split(y, k=2, test_fraction=0.2, seed=8)
    with pytest.raises(ConfigError):
        transfer_experiment(base, x, y, len(base.rows), plan, quick_config())


# ---------------------------------------------------------------------------
# statistics


def test_anova_identical_groups():
    r = one_way_anova([[1.0, 2.0, 3.0]] * 3)
    assert r.f_value == 0.0
    assert r.p_value == 1.0


def test_anova_hand_computed_example():
    r = one_way_anova([[1, 2, 3], [2, 3, 4], [3, 4, 5]])
    assert abs(r.f_value - 3.0) < 1e-10
    assert (r.df_between, r.df_within) == (2, 6)


def test_anova_p_at_study_coordinates():
    from icocnn.experiments import _f_sf

    assert abs(_f_sf(4.472, 2, 27) - 0.021) < 0.002


def test_anova_affine_invariance():
    rng = np.random.default_rng(20)
    groups = [rng.normal(size=8) for _ in range(3)]
    base = one_way_anova(groups)
    moved = one_way_anova([3.7 * g - 11.0 for g in groups])
    assert abs(base.f_value - moved.f_value) < 1e-9
    assert abs(base.p_value - moved.p_value) < 1e-9


def test_anova_unbalanced_groups():
    r = one_way_anova([[1.0, 2.0], [2.0, 3.0, 4.0, 5.0], [5.0, 6.0, 7.0]])
    assert r.df_between == 2
    assert r.df_within == 6
    assert 0.0 < r.p_value < 1.0


def test_anova_validation():
    with pytest.raises(DataError):
        one_way_anova([[1.0, 2.0]])
    with pytest.raises(DataError):
        one_way_anova([[1.0], [2.0, 3.0]])


def test_bonferroni_identical_groups():
    results = bonferroni_pairwise([[1.0, 2.0, 3.0]] * 3)
    assert len(results) == 3
    assert all(r.p_corrected == 1.0 for r in results)


def test_bonferroni_correction_factor():
    rng = np.random.default_rng(21)
    groups = [rng.normal(loc=mu, size=10) for mu in (0.0, 0.5, 1.0)]
    results = bonferroni_pairwise(groups)
    for r in results:
        assert abs(r.p_corrected - min(1.0, r.p_raw * 3)) < 1e-15


def test_bonferroni_matches_scipy():
    from scipy import stats

    rng = np.random.default_rng(22)
    a = rng.normal(size=10)
    b = rng.normal(loc=0.8, size=12)
    (r,) = bonferroni_pairwise([a, b])
    t_ref, p_ref = stats.ttest_ind(a, b)
    assert abs(r.t_value - t_ref) < 1e-10
    assert abs(r.p_raw - p_ref) < 1e-10


def test_bonferroni_agrees_with_permutation_oracle():
    rng = np.random.default_rng(23)
    a = rng.normal(loc=0.0, scale=1.0, size=10)
    b = rng.normal(loc=1.0, scale=1.0, size=10)
    (r,) = bonferroni_pairwise([a, b])
    p_perm = permutation_pairwise_p(a, b, n_resamples=20_000, seed=3)
    assert abs(r.p_raw - p_perm) < 0.01
