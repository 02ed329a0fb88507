"""Training, cross-validation, layer-reuse experiments, and statistics.

The training loop follows the study protocol: minibatch SGD at a 0.02
learning rate, dropping to 0.001 once the validation error stops
improving, a 40-epoch budget extended to 70 when saturation has not been
reached, and early stopping at the best-validation epoch.  Stratified
splitting carves off a fixed test set first and then k folds, preserving
the class ratio everywhere to within one sample.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import betainc

from .errors import ConfigError, DataError, NumericError
from .model import Model


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 50
    max_epochs: int = 40
    extended_epochs: int = 70
    lr_initial: float = 0.02
    lr_fine: float = 0.001
    saturation_window: int = 5
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        # all-zero rates are allowed as an explicit no-op configuration
        if not 0 <= self.lr_fine <= self.lr_initial:
            raise ConfigError(
                f"need 0 <= lr_fine <= lr_initial, got {self.lr_fine} / {self.lr_initial}"
            )
        if self.lr_initial > 0 and self.lr_fine <= 0:
            raise ConfigError("lr_fine must be positive when lr_initial is")
        if self.batch_size < 2:
            raise ConfigError(f"batch size must be >= 2 (batch norm), got {self.batch_size}")
        if not 1 <= self.max_epochs <= self.extended_epochs:
            raise ConfigError(
                f"need 1 <= max_epochs <= extended_epochs, got "
                f"{self.max_epochs} / {self.extended_epochs}"
            )
        if self.saturation_window < 1:
            raise ConfigError(f"saturation window must be >= 1, got {self.saturation_window}")

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Fold:
    index: int
    train_idx: np.ndarray
    val_idx: np.ndarray


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: list[Fold]
    test_idx: np.ndarray
    labels: np.ndarray


@dataclass
class RunRecord:
    fold: int
    seed: int
    train_errors: list[float]
    val_errors: list[float]
    chosen_epoch: int  # 1-based epoch with minimum validation error
    test_accuracy: float | None
    confusion: list[list[int]] | None
    wall_clock_sec: float
    config_hash: str

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "RunRecord":
        return cls(**data)


# ---------------------------------------------------------------------------
# splitting


def _largest_remainder(counts: np.ndarray, total: int) -> np.ndarray:
    """Apportion ``total`` across classes proportionally to ``counts``."""
    quotas = counts * total / counts.sum()
    base = np.floor(quotas).astype(int)
    remainder = quotas - base
    short = total - base.sum()
    order = np.argsort(-remainder, kind="stable")
    base[order[:short]] += 1
    return base


def stratified_split(labels, k: int, test_fraction: float, seed: int = 0) -> FoldPlan:
    """Draw a class-ratio-preserving test set, then k stratified folds.

    Fold f's validation set is its own member list; its training set is
    the union of the other folds.  Deterministic per seed.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise ConfigError(f"need k >= 2 folds, got {k}")
    if not 0 <= test_fraction < 1:
        raise ConfigError(f"test fraction must be in [0, 1), got {test_fraction}")
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ConfigError("stratification needs at least two classes")
    rng = np.random.default_rng(seed)
    n = labels.shape[0]
    test_total = int(round(n * test_fraction))
    test_per_class = _largest_remainder(counts, test_total)
    if np.any(counts - test_per_class < k):
        raise ConfigError(
            f"a class has too few samples for {k} folds after the test split"
        )

    test_parts, fold_parts = [], [[] for _ in range(k)]
    for cls, take in zip(classes, test_per_class):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(members.size)]
        test_parts.append(members[:take])
        rest = members[take:]
        for f in range(k):  # round-robin keeps fold sizes within one sample
            fold_parts[f].append(rest[f::k])

    test_idx = np.sort(np.concatenate(test_parts))
    folds = []
    fold_members = [np.sort(np.concatenate(parts)) for parts in fold_parts]
    for f in range(k):
        val = fold_members[f]
        train = np.sort(np.concatenate([fold_members[g] for g in range(k) if g != f]))
        folds.append(Fold(index=f, train_idx=train, val_idx=val))
    return FoldPlan(k=k, folds=folds, test_idx=test_idx, labels=labels)


# ---------------------------------------------------------------------------
# training


def evaluate(model: Model, x, y, batch_size: int = 256):
    """Eval-mode error rate and confusion counts."""
    pred = model.predict(x, batch_size)
    k = model.meta["classes"]
    confusion = np.zeros((k, k), dtype=int)
    for t, p in zip(y, pred):
        confusion[t, p] += 1
    return float(np.mean(pred != y)), confusion


def train(model: Model, x_train, y_train, x_val, y_val, config: TrainConfig):
    """Optimize the model in place; returns the RunRecord.

    One epoch is a pass over the shuffled training set in batches of
    ``batch_size``; a trailing remainder of one sample is folded into the
    previous batch (batch norm needs two).  Once the validation error has
    not improved for ``saturation_window`` consecutive epochs the learning
    rate drops to ``lr_fine``.  Training stops at ``max_epochs`` if
    saturated by then, else runs on to ``extended_epochs``.  On completion
    the parameters (and batch-norm statistics) of the best-validation
    epoch are restored.
    """
    if x_train.shape[0] == 0 or x_val.shape[0] == 0:
        raise DataError("training and validation sets must be non-empty")
    rng = np.random.default_rng(config.seed)
    start = time.perf_counter()
    lr = config.lr_initial
    saturated = False
    stale = 0
    best_val = np.inf
    best_epoch = 0
    best_snapshot = model.snapshot()
    train_errors: list[float] = []
    val_errors: list[float] = []

    epoch = 0
    while True:
        epoch += 1
        order = rng.permutation(x_train.shape[0]) if config.shuffle else np.arange(x_train.shape[0])
        bounds = list(range(0, order.size, config.batch_size))
        if order.size - bounds[-1] == 1 and len(bounds) > 1:
            bounds.pop()  # avoid a singleton batch
        wrong = 0
        for i, lo in enumerate(bounds):
            hi = bounds[i + 1] if i + 1 < len(bounds) else order.size
            batch = order[lo:hi]
            try:
                loss, pred = model.loss_and_gradients(x_train[batch], y_train[batch], train=True)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {i}: {exc}") from exc
            if not np.isfinite(loss):
                raise NumericError(f"training diverged at epoch {epoch}, batch {i}")
            wrong += int(np.sum(pred != y_train[batch]))
            model.sgd_step(lr)
        train_errors.append(wrong / order.size)
        val_err, _ = evaluate(model, x_val, y_val)
        val_errors.append(val_err)

        if val_err < best_val:
            best_val = val_err
            best_epoch = epoch
            best_snapshot = model.snapshot()
            stale = 0
        else:
            stale += 1
        if not saturated and stale >= config.saturation_window:
            saturated = True
            lr = config.lr_fine
        if (epoch >= config.max_epochs and saturated) or epoch >= config.extended_epochs:
            break

    model.restore(best_snapshot)
    return RunRecord(
        fold=-1,
        seed=config.seed,
        train_errors=train_errors,
        val_errors=val_errors,
        chosen_epoch=best_epoch,
        test_accuracy=None,
        confusion=None,
        wall_clock_sec=time.perf_counter() - start,
        config_hash=config.hash(),
    )


def cross_validate(model_builder, x, y, plan: FoldPlan, config: TrainConfig):
    """Train one independently seeded model per fold and score each on the
    common test set.  ``model_builder(seed)`` must return a fresh model.
    Per-fold seeds derive from the fold's plan index, so reordering the
    folds permutes the records without changing them."""
    records = []
    for fold in plan.folds:
        fold_seed = config.seed + fold.index
        fold_config = TrainConfig(**{**asdict(config), "seed": fold_seed})
        model = model_builder(fold_seed)
        record = train(
            model, x[fold.train_idx], y[fold.train_idx], x[fold.val_idx], y[fold.val_idx],
            fold_config,
        )
        test_err, confusion = evaluate(model, x[plan.test_idx], y[plan.test_idx])
        record.fold = fold.index
        record.test_accuracy = 1.0 - test_err
        record.confusion = confusion.tolist()
        records.append(record)
    return records


def summarize(records) -> dict:
    acc = np.array([r.test_accuracy for r in records], dtype=float)
    return {
        "folds": len(records),
        "mean_accuracy": float(acc.mean()),
        "std_accuracy": float(acc.std(ddof=1)) if acc.size > 1 else 0.0,
        "accuracies": acc.tolist(),
    }


# ---------------------------------------------------------------------------
# transfer (layer reuse)


def head_builder(model: Model, freeze_count: int):
    """Builder producing fresh copies of the rows above ``freeze_count``.

    The returned callable maps a seed to a trainable head model whose
    input is the frozen prefix's output.  Mesh resources (index maps and
    pooling groups) are shared with the base model; parameters are
    re-initialized per seed.
    """
    from . import model as model_mod

    if not 0 <= freeze_count < len(model.rows):
        raise ConfigError(
            f"freeze count {freeze_count} leaves no trainable head "
            f"(model has {len(model.rows)} rows)"
        )
    prefix_shape = model.shape_chain(batch=1)[freeze_count]
    descriptors = [row.descriptor() for row in model.rows[freeze_count:]]
    resources = [
        row if isinstance(row, (model_mod.MeshConv, model_mod.MeshPool)) else None
        for row in model.rows[freeze_count:]
    ]

    def build(seed: int) -> Model:
        rng = np.random.default_rng(seed)
        rows = []
        for desc, res in zip(descriptors, resources):
            kind = desc["kind"]
            if kind == "mesh_conv":
                rows.append(model_mod.MeshConv(res.index_map, desc["in"], desc["out"], rng))
            elif kind == "mesh_pool":
                rows.append(model_mod.MeshPool(res.groups, res.n_fine, res.n_coarse))
            elif kind == "batch_norm":
                rows.append(model_mod.BatchNorm(desc["channels"], desc["epsilon"], desc["momentum"]))
            elif kind == "relu":
                rows.append(model_mod.ReLU())
            elif kind == "dense":
                rows.append(model_mod.Dense(desc["in"], desc["out"], rng))
            elif kind == "conv2d":
                rows.append(
                    model_mod.Conv2d(
                        desc["kernel"], desc["stride"], desc["pad"], desc["in"], desc["out"], rng
                    )
                )
            elif kind == "mean_pool2d":
                rows.append(model_mod.MeanPool2d(desc["kernel"], desc["stride"]))
            elif kind == "softmax":
                rows.append(model_mod.Softmax())
            else:
                raise ConfigError(f"cannot rebuild head row {kind!r}")
        meta = dict(model.meta)
        meta["head_input_shape"] = list(prefix_shape[1:])
        head = Model.__new__(Model)
        head.kind = model.kind + "-head"
        head.rows = rows
        head.meta = meta
        return head

    return build


def transfer_experiment(
    base_model: Model, x, y, freeze_count: int, plan: FoldPlan, config: TrainConfig,
    feature_batch: int = 64,
):
    """Retrain only the head of a trained model on a (rotated) dataset.

    The frozen prefix runs once per sample in eval mode (frozen batch
    norms use their stored statistics), then the rows above the freeze
    line are re-initialized and cross-validated on those features.
    """
    base_model.freeze_prefix(freeze_count)
    features = base_model.forward_rows(x, freeze_count, batch_size=feature_batch)
    builder = head_builder(base_model, freeze_count)
    return cross_validate(builder, features, y, plan, config)


# ---------------------------------------------------------------------------
# statistics


def _f_sf(f_value: float, df1: int, df2: int) -> float:
    """Survival function of the F distribution via the regularized
    incomplete beta function."""
    if not np.isfinite(f_value):
        return 0.0
    if f_value <= 0:
        return 1.0
    x = df2 / (df2 + df1 * f_value)
    return float(betainc(df2 / 2.0, df1 / 2.0, x))


def _t_sf_two_sided(t_value: float, df: int) -> float:
    if not np.isfinite(t_value):
        return 0.0
    x = df / (df + t_value * t_value)
    return float(betainc(df / 2.0, 0.5, x))


@dataclass(frozen=True)
class AnovaResult:
    f_value: float
    df_between: int
    df_within: int
    p_value: float


@dataclass(frozen=True)
class PairwiseResult:
    group_a: int
    group_b: int
    t_value: float
    p_raw: float
    p_corrected: float


def one_way_anova(groups) -> AnovaResult:
    """Fixed-effects one-way ANOVA (unequal group sizes allowed)."""
    arrays = [np.asarray(g, dtype=float) for g in groups]
    if len(arrays) < 2 or any(a.size < 2 for a in arrays):
        raise DataError("ANOVA needs at least two groups of at least two values")
    n_total = sum(a.size for a in arrays)
    grand = np.concatenate(arrays).mean()
    ss_between = sum(a.size * (a.mean() - grand) ** 2 for a in arrays)
    ss_within = sum(((a - a.mean()) ** 2).sum() for a in arrays)
    df_between = len(arrays) - 1
    df_within = n_total - len(arrays)
    if ss_between <= 0.0:
        return AnovaResult(0.0, df_between, df_within, 1.0)
    if ss_within <= 0.0:
        return AnovaResult(float("inf"), df_between, df_within, 0.0)
    f_value = (ss_between / df_between) / (ss_within / df_within)
    return AnovaResult(float(f_value), df_between, df_within, _f_sf(f_value, df_between, df_within))


def bonferroni_pairwise(groups) -> list[PairwiseResult]:
    """Pooled-variance two-sample t-tests for every pair, with the raw
    two-sided p multiplied by the number of pairs (capped at 1)."""
    arrays = [np.asarray(g, dtype=float) for g in groups]
    if len(arrays) < 2 or any(a.size < 2 for a in arrays):
        raise DataError("pairwise tests need at least two groups of at least two values")
    n_pairs = len(arrays) * (len(arrays) - 1) // 2
    results = []
    for i in range(len(arrays)):
        for j in range(i + 1, len(arrays)):
            a, b = arrays[i], arrays[j]
            df = a.size + b.size - 2
            pooled = (((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()) / df
            se = np.sqrt(pooled * (1.0 / a.size + 1.0 / b.size))
            diff = a.mean() - b.mean()
            if se == 0.0:
                t = 0.0 if diff == 0.0 else float("inf") * np.sign(diff)
            else:
                t = diff / se
            p_raw = _t_sf_two_sided(abs(t), df) if np.isfinite(t) else 0.0
            if t == 0.0:
                p_raw = 1.0
            results.append(
                PairwiseResult(i, j, float(t), p_raw, min(1.0, p_raw * n_pairs))
            )
    return results


def permutation_pairwise_p(a, b, n_resamples: int = 100_000, seed: int = 0) -> float:
    """Two-sided permutation test on the pooled-variance t statistic; the
    independent oracle for the parametric pairwise test."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    pooled = np.concatenate([a, b])
    n_a = a.size

    def t_stat(x, y):
        df = x.size + y.size - 2
        var = (((x - x.mean()) ** 2).sum() + ((y - y.mean()) ** 2).sum()) / df
        se = np.sqrt(var * (1.0 / x.size + 1.0 / y.size))
        return 0.0 if se == 0.0 else (x.mean() - y.mean()) / se

    observed = abs(t_stat(a, b))
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_resamples):
        perm = rng.permutation(pooled)
        if abs(t_stat(perm[:n_a], perm[n_a:])) >= observed - 1e-12:
            hits += 1
    return (hits + 1) / (n_resamples + 1)
