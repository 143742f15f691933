"""Training loop, hyperparameter sweep, and the end-to-end experiment.

Training pairs every in-distribution batch with an equally sized batch
drawn cyclically from the auxiliary outlier stream whenever the
objective consumes one. After each epoch the validation criterion is
evaluated and the best epoch's parameters are restored at the end.
"""

from __future__ import annotations

import dataclasses
import functools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import objectives
from .datasynth import CORRUPTION_KINDS, SEVERITIES, CorruptionSpec, DatasetSplit, corrupt
from .metrics import EvalReport, accuracy, auc_roc, classify, mce
from .nn import (
    DivergenceError,
    MlpModel,
    OptimizerState,
    backward,
    forward,
    init_mlp,
    sgd_step,
)
from .objectives import ObjectiveParams
from .scores import (
    confidence_score,
    deterministic_samples,
    entropy_score,
    fit_mahalanobis,
    mahalanobis_score,
    mc_dropout_predict,
    mutual_information_score,
    penultimate_features,
)
from .seeding import (
    STREAM_CORRUPT,
    STREAM_DROPOUT,
    STREAM_INIT,
    STREAM_MC,
    STREAM_OOD_SHUFFLE,
    STREAM_SHUFFLE,
    STREAM_VAL_MC,
    derive_rng,
    derive_seed,
)

OBJECTIVES = ("ce", "ce_l1", "ce_cosine", "cosine_margin", "outlier_exposure")
OOD_OBJECTIVES = ("ce_cosine", "cosine_margin", "outlier_exposure")


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite. Carries the partial history."""

    def __init__(self, message: str, history: "TrainHistory | None" = None):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    objective: str = "ce"
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 3e-4
    dropout_rate: float = 0.0
    hidden_dims: tuple[int, ...] = (64, 64)
    lam: float = -1.0
    gamma: float = -0.5
    lambda1: float = 0.5
    lambda2: float = 0.1
    alpha: float = 0.95
    k: int = 3
    mc_passes: int = 30
    ce_l1_strength: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(
                f"objective must be one of {OBJECTIVES}, got {self.objective!r}"
            )
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        # lr = 0 is allowed so a freeze run stays expressible
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(
                f"dropout_rate must be in [0, 1), got {self.dropout_rate}"
            )
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden_dims must be positive, got {self.hidden_dims}")
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.mc_passes < 1:
            raise ValueError(f"mc_passes must be >= 1, got {self.mc_passes}")
        if self.ce_l1_strength < 0:
            raise ValueError(
                f"ce_l1_strength must be >= 0, got {self.ce_l1_strength}"
            )
        if self.objective == "outlier_exposure" and self.lam < 0:
            raise ValueError(
                f"outlier_exposure requires lam >= 0, got {self.lam}"
            )
        # delegate range checks shared with the loss layer
        self.objective_params()

    def objective_params(self) -> ObjectiveParams:
        return ObjectiveParams(
            lam=self.lam,
            gamma=self.gamma,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            alpha=self.alpha,
            k=self.k,
        )

    def needs_ood(self) -> bool:
        return self.objective in OOD_OBJECTIVES


@dataclass
class EpochRecord:
    epoch: int  # 1-based
    train_loss: float
    loss_terms: dict[str, float]
    val_accuracy: float
    val_entropy_auc: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    rollback_applied: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# Tuned per-objective rows for the default benchmark. The detection
# objectives train with dropout so the MC pass count is meaningful; the
# cross-entropy baselines stay deterministic (pass dropout_rate=0.2 to
# get the MC-dropout row of the same objective). cosine_margin carries a
# larger pass count because its pass-to-pass disagreement signal is
# smaller than ce_cosine's and needs more samples to resolve.
_OBJECTIVE_ROWS: dict[str, dict] = {
    "ce": {},
    "ce_l1": {},
    "ce_cosine": {
        "lam": 1.0,
        "weight_decay": 3e-3,
        "dropout_rate": 0.2,
        "mc_passes": 200,
    },
    "cosine_margin": {
        "hidden_dims": (128, 128),
        "dropout_rate": 0.4,
        "gamma": -0.5,
        "lambda1": 0.35,
        "lambda2": 1.0,
        "alpha": 0.95,
        "mc_passes": 200,
    },
    "outlier_exposure": {"lam": 1.0, "dropout_rate": 0.2},
}


def default_config(objective: str, seed: int = 0) -> TrainConfig:
    """Per-objective defaults used by the benchmark reproduction."""
    if objective not in _OBJECTIVE_ROWS:
        raise ValueError(
            f"objective must be one of {OBJECTIVES}, got {objective!r}"
        )
    return TrainConfig(objective=objective, seed=seed, **_OBJECTIVE_ROWS[objective])


def _objective_loss(
    config: TrainConfig,
    params: ObjectiveParams,
    logits_in: np.ndarray,
    labels: np.ndarray,
    logits_out: np.ndarray | None,
) -> objectives.LossResult:
    name = config.objective
    if name in ("ce", "ce_l1"):
        return objectives.cross_entropy_loss(logits_in, labels)
    if name == "ce_cosine":
        return objectives.ce_cosine_loss(logits_in, labels, logits_out, config.lam)
    if name == "cosine_margin":
        return objectives.cosine_margin_ranking_loss(
            logits_in, labels, logits_out, params
        )
    if name == "outlier_exposure":
        return objectives.outlier_exposure_loss(
            logits_in, labels, logits_out, config.lam
        )
    raise ValueError(f"unknown objective {name!r}")


# Pass count for per-epoch validation of dropout models. Fixed rather
# than tied to the eval-time mc_passes so checkpoint selection does not
# change when someone re-scores an existing model with a different T.
VAL_MC_PASSES = 30


def _validation_metrics(
    model: MlpModel,
    val: DatasetSplit,
    val_ood: DatasetSplit,
    mc_seed: int | None = None,
) -> tuple[float, float]:
    """Validation accuracy and entropy AUC under deployment semantics.

    A dropout model is validated the way it is deployed: MC-averaged
    predictions. A deterministic model uses a single eval pass.
    """
    if model.dropout_rate > 0 and mc_seed is not None:
        s_val = mc_dropout_predict(model, val.features, VAL_MC_PASSES, mc_seed)
        s_ood = mc_dropout_predict(
            model, val_ood.features, VAL_MC_PASSES, derive_seed(mc_seed, 1)
        )
        val_acc = accuracy(s_val.mean_probs().argmax(axis=1), val.labels)
    else:
        s_val = deterministic_samples(model, val.features)
        s_ood = deterministic_samples(model, val_ood.features)
        val_acc = accuracy(classify(model, val.features), val.labels)
    ent_auc = 100.0 * auc_roc(
        entropy_score(s_val), entropy_score(s_ood), "higher_ood"
    )
    return val_acc, ent_auc


def _epoch_criterion(config: TrainConfig, record: EpochRecord) -> tuple:
    # OOD-blind baselines must not select their checkpoint on OOD data
    if config.needs_ood():
        return (record.val_accuracy, record.val_entropy_auc)
    return (record.val_accuracy, -record.train_loss)


def train(
    config: TrainConfig, benchmark: dict[str, DatasetSplit], model: MlpModel
) -> tuple[MlpModel, TrainHistory]:
    """Train a copy of `model` under the configured objective.

    benchmark needs "train" and "val"; OOD-consuming objectives also
    need "train_ood". Validation OOD separation is measured against
    "val_ood" when present, else against "train_ood" (the held-out
    test_ood split is never touched here).
    """
    for key in ("train", "val"):
        if key not in benchmark:
            raise ValueError(f"benchmark is missing the {key!r} split")
    train_split = benchmark["train"]
    val_split = benchmark["val"]
    if config.needs_ood() and "train_ood" not in benchmark:
        raise ValueError(
            f"objective {config.objective!r} requires a train_ood split"
        )
    val_ood = benchmark.get("val_ood") or benchmark.get("train_ood")
    if val_ood is None:
        raise ValueError("benchmark needs train_ood or val_ood for validation")
    if model.input_dim != train_split.features.shape[1]:
        raise ValueError("model input dim does not match training features")
    if train_split.labels.max() >= model.num_classes:
        raise ValueError("training labels exceed model classes")

    model = model.copy()
    params = config.objective_params()
    state = OptimizerState.zeros(
        model, config.lr, config.momentum, config.weight_decay
    )
    shuffle_rng = derive_rng(config.seed, STREAM_SHUFFLE)

    ood_features = None
    ood_pos = 0
    if config.needs_ood():
        ood_rng = derive_rng(config.seed, STREAM_OOD_SHUFFLE)
        ood_features = benchmark["train_ood"].features[
            ood_rng.permutation(len(benchmark["train_ood"]))
        ]

    def next_ood_batch(size: int) -> np.ndarray:
        # cyclic pointer: every outlier is consumed once per wrap
        nonlocal ood_pos
        out = np.empty((size, ood_features.shape[1]))
        filled = 0
        while filled < size:
            take = min(size - filled, len(ood_features) - ood_pos)
            out[filled:filled + take] = ood_features[ood_pos:ood_pos + take]
            filled += take
            ood_pos = (ood_pos + take) % len(ood_features)
        return out

    history = TrainHistory()
    best_criterion = None
    best_params: tuple[list, list] | None = None
    dropout_counter = 0
    n_train = len(train_split)

    for epoch in range(1, config.epochs + 1):
        perm = shuffle_rng.permutation(n_train)
        loss_sum = 0.0
        term_sums: dict[str, float] = {}
        seen = 0
        for start in range(0, n_train, config.batch_size):
            idx = perm[start:start + config.batch_size]
            xb = train_split.features[idx]
            yb = train_split.labels[idx]
            logits_in, trace_in = forward(
                model, xb, mode="train",
                seed=derive_seed(config.seed, STREAM_DROPOUT, dropout_counter),
            )
            dropout_counter += 1
            logits_out, trace_out = None, None
            if config.needs_ood():
                ob = next_ood_batch(len(idx))
                # The outlier terms shape the predictive distribution, so
                # this branch runs without dropout: constraining every
                # dropout subnetwork to be flat on outliers would erase
                # the pass-to-pass disagreement that mutual information
                # measures at test time.
                logits_out, trace_out = forward(model, ob, mode="eval")
            if not np.all(np.isfinite(logits_in)) or (
                logits_out is not None and not np.all(np.isfinite(logits_out))
            ):
                raise TrainingDiverged(
                    f"non-finite logits at epoch {epoch}", history
                )
            result = _objective_loss(config, params, logits_in, yb, logits_out)
            loss = result.loss
            terms = dict(result.terms)

            grads = backward(model, trace_in, result.d_logits_in)
            if result.d_logits_out is not None:
                ood_grads = backward(model, trace_out, result.d_logits_out)
                for gw, ow in zip(grads.weights, ood_grads.weights):
                    gw += ow
                for gb, ob_ in zip(grads.biases, ood_grads.biases):
                    gb += ob_
            if config.objective == "ce_l1" and config.ce_l1_strength > 0:
                penalty = config.ce_l1_strength * sum(
                    float(np.abs(w).sum()) for w in model.weights
                )
                loss += penalty
                terms["weight_l1"] = penalty
                for gw, w in zip(grads.weights, model.weights):
                    gw += config.ce_l1_strength * np.sign(w)

            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}", history
                )
            try:
                sgd_step(model, grads, state)
            except DivergenceError as exc:
                raise TrainingDiverged(
                    f"{exc} (epoch {epoch})", history
                ) from exc
            loss_sum += loss * len(idx)
            for name, val in terms.items():
                term_sums[name] = term_sums.get(name, 0.0) + val * len(idx)
            seen += len(idx)

        try:
            val_acc, ent_auc = _validation_metrics(
                model, val_split, val_ood,
                mc_seed=derive_seed(config.seed, STREAM_VAL_MC, epoch),
            )
        except ValueError as exc:
            # finite but extreme parameters can overflow the validation
            # forward pass; that is a divergence, not a usage error
            raise TrainingDiverged(
                f"non-finite validation outputs at epoch {epoch}", history
            ) from exc
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / seen,
            loss_terms={k: v / seen for k, v in term_sums.items()},
            val_accuracy=val_acc,
            val_entropy_auc=ent_auc,
        )
        history.records.append(record)
        criterion = _epoch_criterion(config, record)
        # ties go to the later epoch: the outlier-shaping terms keep
        # tightening after the validation criterion saturates
        if best_criterion is None or criterion >= best_criterion:
            best_criterion = criterion
            history.best_epoch = epoch
            best_params = (
                [w.copy() for w in model.weights],
                [b.copy() for b in model.biases],
            )

    assert best_params is not None
    if history.best_epoch != config.epochs:
        history.rollback_applied = True
        model.weights = best_params[0]
        model.biases = best_params[1]
    return model, history


@dataclass
class SweepRow:
    index: int
    overrides: dict
    val_accuracy: float | None
    val_entropy_auc: float | None
    diverged: bool
    selected: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _sweep_task(
    cfg: TrainConfig, benchmark: dict[str, DatasetSplit]
) -> tuple[float, float, bool]:
    """Train one grid point; returns (val_acc, val_entropy_auc, diverged).

    Module-level so process pools can pickle it.
    """
    input_dim = benchmark["train"].features.shape[1]
    model = init_mlp(
        [input_dim, *cfg.hidden_dims, cfg.k],
        cfg.dropout_rate,
        seed=derive_seed(cfg.seed, STREAM_INIT),
    )
    try:
        _, history = train(cfg, benchmark, model)
    except TrainingDiverged:
        return (0.0, 0.0, True)
    best = history.records[history.best_epoch - 1]
    return (best.val_accuracy, best.val_entropy_auc, False)


def sweep(
    base_config: TrainConfig,
    grid: list[dict],
    benchmark: dict[str, DatasetSplit],
    workers: int = 1,
) -> tuple[TrainConfig, list[SweepRow]]:
    """Train every override point and select the best.

    Selection: among points whose validation accuracy is within 1.0
    point of the grid's best, take the highest validation entropy AUC.
    Grid points share the base seed, so the winning configuration can be
    re-trained standalone and reproduce its leaderboard row exactly.

    workers > 1 trains grid points in a process pool; results are merged
    by grid index, so the leaderboard is independent of scheduling.
    """
    if not grid:
        raise ValueError("grid must contain at least one point")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    configs: list[TrainConfig] = []
    for i, overrides in enumerate(grid):
        bad = set(overrides) - {f.name for f in dataclasses.fields(TrainConfig)}
        if bad:
            raise ValueError(f"grid point {i} has unknown fields: {sorted(bad)}")
        try:
            cfg = dataclasses.replace(base_config, **overrides)
        except ValueError as exc:
            raise ValueError(f"grid point {i} invalid: {exc}") from exc
        configs.append(cfg)

    task = functools.partial(_sweep_task, benchmark=benchmark)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(task, configs))
    else:
        outcomes = [task(cfg) for cfg in configs]

    rows = []
    for i, (overrides, (val_acc, ent_auc, diverged)) in enumerate(
        zip(grid, outcomes)
    ):
        if diverged:
            rows.append(SweepRow(i, dict(overrides), None, None, diverged=True))
        else:
            rows.append(
                SweepRow(i, dict(overrides), val_acc, ent_auc, diverged=False)
            )

    survivors = [r for r in rows if not r.diverged]
    if not survivors:
        raise TrainingDiverged("all grid points diverged")
    best_acc = max(r.val_accuracy for r in survivors)
    eligible = [r for r in survivors if r.val_accuracy >= best_acc - 1.0]
    winner = max(eligible, key=lambda r: (r.val_entropy_auc, -r.index))
    winner.selected = True

    def sort_key(r: SweepRow):
        if r.diverged:
            return (2, 0.0, 0.0, r.index)
        guard = 0 if r.val_accuracy >= best_acc - 1.0 else 1
        return (guard, -r.val_entropy_auc, -r.val_accuracy, r.index)

    rows.sort(key=sort_key)
    return configs[winner.index], rows


def corruption_error_table(
    model: MlpModel, test_id: DatasetSplit, seed: int
) -> dict[str, dict[int, float]]:
    """Classification error percent for every corruption kind and severity."""
    table: dict[str, dict[int, float]] = {}
    for ki, kind in enumerate(CORRUPTION_KINDS):
        table[kind] = {}
        for sev in SEVERITIES:
            spec = CorruptionSpec(kind, sev)
            corrupted = corrupt(
                test_id, spec, derive_seed(seed, STREAM_CORRUPT, ki, sev)
            )
            err = 100.0 - accuracy(
                classify(model, corrupted.features), corrupted.labels
            )
            table[kind][sev] = err
    return table


def predictive_samples_pair(
    model: MlpModel,
    test_id: DatasetSplit,
    test_ood: DatasetSplit,
    mc_passes: int = 1,
    seed: int = 0,
):
    """Predictive samples for both held-out splits.

    mc_passes > 1 on a dropout model samples stochastic passes;
    otherwise a single deterministic pass is used.
    """
    if mc_passes > 1 and model.dropout_rate > 0:
        mc_seed = derive_seed(seed, STREAM_MC)
        s_id = mc_dropout_predict(model, test_id.features, mc_passes, mc_seed)
        s_ood = mc_dropout_predict(
            model, test_ood.features, mc_passes, derive_seed(mc_seed, 1)
        )
    else:
        s_id = deterministic_samples(model, test_id.features)
        s_ood = deterministic_samples(model, test_ood.features)
    return s_id, s_ood


def score_populations(
    model: MlpModel,
    test_id: DatasetSplit,
    test_ood: DatasetSplit,
    mc_passes: int = 1,
    seed: int = 0,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Raw (id, ood) score pairs for the softmax-statistic kinds."""
    s_id, s_ood = predictive_samples_pair(
        model, test_id, test_ood, mc_passes=mc_passes, seed=seed
    )
    return {
        "confidence": (confidence_score(s_id), confidence_score(s_ood)),
        "entropy": (entropy_score(s_id), entropy_score(s_ood)),
        "mutual_information": (
            mutual_information_score(s_id),
            mutual_information_score(s_ood),
        ),
    }


_ORIENTATION = {
    "confidence": "higher_id",
    "entropy": "higher_ood",
    "mutual_information": "higher_ood",
    "mahalanobis": "higher_id",
}


def _auc_table(pops: dict[str, tuple]) -> dict[str, float]:
    return {
        kind: 100.0 * auc_roc(s_id, s_ood, _ORIENTATION[kind])
        for kind, (s_id, s_ood) in pops.items()
    }


def mahalanobis_populations(
    model: MlpModel,
    train_split: DatasetSplit,
    test_id: DatasetSplit,
    test_ood: DatasetSplit,
) -> tuple[np.ndarray, np.ndarray]:
    """Mahalanobis scores over penultimate features, fit on the train split."""
    feats_train = penultimate_features(model, train_split.features)
    detector = fit_mahalanobis(feats_train, train_split.labels)
    m_id = mahalanobis_score(detector, penultimate_features(model, test_id.features))
    m_ood = mahalanobis_score(detector, penultimate_features(model, test_ood.features))
    return m_id, m_ood


def evaluate_model(
    model: MlpModel,
    benchmark: dict[str, DatasetSplit],
    mc_passes: int = 1,
    seed: int = 0,
    with_mahalanobis: bool = False,
    with_corruptions: bool = False,
) -> EvalReport:
    """Score a trained model on the held-out splits.

    With mc_passes > 1 on a dropout model, accuracy and the `auc` block
    both come from the MC-averaged predictive distribution; otherwise
    from a single deterministic pass, under which mutual information is
    identically zero and its AUC degenerates to 50.00 (flagged in
    warnings).
    """
    for key in ("test_id", "test_ood"):
        if key not in benchmark:
            raise ValueError(f"benchmark is missing the {key!r} split")
    test_id = benchmark["test_id"]
    test_ood = benchmark["test_ood"]
    warnings: list[str] = []

    s_id, s_ood = predictive_samples_pair(
        model, test_id, test_ood, mc_passes=mc_passes, seed=seed
    )
    id_acc = accuracy(s_id.mean_probs().argmax(axis=1), test_id.labels)
    pops = {
        "confidence": (confidence_score(s_id), confidence_score(s_ood)),
        "entropy": (entropy_score(s_id), entropy_score(s_ood)),
        "mutual_information": (
            mutual_information_score(s_id),
            mutual_information_score(s_ood),
        ),
    }
    auc = _auc_table(pops)
    if mc_passes > 1 and model.dropout_rate == 0:
        warnings.append(
            "mc_passes > 1 requested but the model has dropout_rate 0; "
            "scores fall back to a single deterministic pass"
        )
    if mc_passes <= 1 or model.dropout_rate == 0:
        warnings.append(
            "mutual_information is identically zero for single-pass "
            "deterministic evaluation; its AUC degenerates to 50.00"
        )

    if with_mahalanobis:
        if "train" not in benchmark:
            raise ValueError("mahalanobis evaluation needs the train split")
        m_id, m_ood = mahalanobis_populations(
            model, benchmark["train"], test_id, test_ood
        )
        auc["mahalanobis"] = 100.0 * auc_roc(m_id, m_ood, "higher_id")

    mce_value = None
    if with_corruptions:
        table = corruption_error_table(model, test_id, seed)
        mce_value = mce(table)

    return EvalReport(
        id_accuracy=id_acc,
        auc=auc,
        mce=mce_value,
        warnings=warnings,
    )


def run_experiment(
    config: TrainConfig,
    benchmark: dict[str, DatasetSplit],
    with_mahalanobis: bool = False,
    with_corruptions: bool = False,
) -> tuple[MlpModel, TrainHistory, EvalReport]:
    """Init, train, and evaluate in one deterministic call."""
    for key in ("train", "val", "test_id", "test_ood"):
        if key not in benchmark:
            raise ValueError(f"benchmark is missing the {key!r} split")
    input_dim = benchmark["train"].features.shape[1]
    model = init_mlp(
        [input_dim, *config.hidden_dims, config.k],
        config.dropout_rate,
        seed=derive_seed(config.seed, STREAM_INIT),
    )
    trained, history = train(config, benchmark, model)
    report = evaluate_model(
        trained,
        benchmark,
        mc_passes=config.mc_passes,
        seed=config.seed,
        with_mahalanobis=with_mahalanobis,
        with_corruptions=with_corruptions,
    )
    return trained, history, report
