"""Acceptance gate: one test per shipped guarantee.

Run with -v for a pass/fail line per criterion. The leaderboard and
multi-seed fixtures train real models on the default benchmark, so this
module dominates the suite's wall time.
"""

import json
import time

import numpy as np
import pytest

from oodkit.datasynth import CORRUPTION_KINDS, SEVERITIES, make_default_benchmark
from oodkit.metrics import auc_roc, mce
from oodkit.nn import softmax
from oodkit.objectives import (
    ObjectiveParams,
    ce_cosine_loss,
    cosine_margin_ranking_loss,
    cross_entropy_loss,
    outlier_exposure_loss,
    triplet_ranking_loss,
)
from oodkit.scores import MahalanobisDetector, mahalanobis_score
from oodkit.trainer import TrainConfig, default_config, run_experiment

from _gradcheck import check_pair_gradients

OBJECTIVES = ("ce", "ce_l1", "ce_cosine", "cosine_margin", "outlier_exposure")
SCORE_KINDS = ("confidence", "entropy", "mutual_information")
RUN_BUDGET_SECONDS = 120.0


@pytest.fixture(scope="module")
def leaderboard():
    """Per-objective report and wall time on the default benchmark."""
    benchmark = make_default_benchmark(seed=0)
    rows = {}
    for objective in OBJECTIVES:
        start = time.perf_counter()
        _, _, report = run_experiment(default_config(objective), benchmark)
        rows[objective] = (report, time.perf_counter() - start)
    return rows


@pytest.fixture(scope="module")
def seeded_runs():
    """Five-seed comparison set: plain CE, CE with MC-Dropout, ce_cosine."""
    gaps = {kind: [] for kind in SCORE_KINDS}
    mce_values = {"ce": [], "ce_cosine": []}
    for seed in range(5):
        benchmark = make_default_benchmark(seed=seed)
        _, _, rep_ce = run_experiment(
            default_config("ce", seed=seed), benchmark, with_corruptions=True
        )
        _, _, rep_mcd = run_experiment(
            TrainConfig(objective="ce", dropout_rate=0.2, seed=seed), benchmark
        )
        _, _, rep_cos = run_experiment(
            default_config("ce_cosine", seed=seed), benchmark,
            with_corruptions=True,
        )
        for kind in SCORE_KINDS:
            gaps[kind].append(rep_mcd.auc[kind] - rep_ce.auc[kind])
        mce_values["ce"].append(rep_ce.mce)
        mce_values["ce_cosine"].append(rep_cos.mce)
    return {"gaps": gaps, "mce": mce_values}


def test_criterion_01_objective_leaderboard(leaderboard):
    for objective, (report, seconds) in leaderboard.items():
        print(
            f"{objective}: acc={report.id_accuracy:.2f} "
            + " ".join(f"{k}={report.auc[k]:.2f}" for k in SCORE_KINDS)
            + f" ({seconds:.1f}s)"
        )
        assert seconds <= RUN_BUDGET_SECONDS, objective
        assert report.id_accuracy >= 99.0, objective
    ce_auc = leaderboard["ce"][0].auc
    for objective in ("ce_cosine", "cosine_margin"):
        auc = leaderboard[objective][0].auc
        for kind in SCORE_KINDS:
            assert auc[kind] >= 99.0, (objective, kind)
            assert auc[kind] - ce_auc[kind] >= 10.0, (objective, kind)


def test_criterion_02_mc_dropout_gains(seeded_runs):
    for kind in SCORE_KINDS:
        mean_gap = float(np.mean(seeded_runs["gaps"][kind]))
        print(f"mc-dropout mean gain on {kind}: {mean_gap:+.2f}")
        assert mean_gap >= 3.0, kind


def test_criterion_03_gradient_oracle():
    rng = np.random.default_rng(0)

    def random_shapes():
        return int(rng.integers(2, 6)), int(rng.integers(2, 7))

    worst = {}

    errs = []
    for _ in range(100):
        n, k = random_shapes()
        z = rng.normal(size=(n, k)) * 2.0
        y = rng.integers(0, k, size=n)
        errs.append(check_pair_gradients(
            lambda zi, zo, y=y: cross_entropy_loss(zi, y), z, None
        ))
    worst["cross_entropy"] = max(errs)

    errs = []
    for _ in range(100):
        n, k = random_shapes()
        z_in = rng.normal(size=(n, k)) * 2.0
        z_out = rng.normal(size=(n, k)) * 2.0
        y = rng.integers(0, k, size=n)
        lam = float(rng.uniform(-2.0, 2.0))
        errs.append(check_pair_gradients(
            lambda zi, zo, y=y, lam=lam: ce_cosine_loss(zi, y, zo, lam),
            z_in, z_out,
        ))
    worst["ce_cosine"] = max(errs)

    errs = []
    done = 0
    while done < 100:
        n, k = random_shapes()
        z_in = rng.normal(size=(n, k)) * 2.0
        z_out = rng.normal(size=(n, k)) * 2.0
        y = rng.integers(0, k, size=n)
        params = ObjectiveParams(
            gamma=float(rng.uniform(-1.0, 1.0)),
            lambda1=float(rng.uniform(0.0, 1.0)),
            lambda2=float(rng.uniform(0.0, 1.0)),
            alpha=float(rng.uniform(0.5, 1.0)),
            k=k,
        )
        p, q = softmax(z_in), softmax(z_out)
        cos = (p * q).sum(axis=1) / (
            np.linalg.norm(p, axis=1) * np.linalg.norm(q, axis=1)
        )
        # both non-smooth points get a guard band: the hinge kink and the
        # uniformity term's absolute-value kinks
        if abs(params.gamma + cos.mean()) < 1e-3:
            continue
        if np.abs(q - 1.0 / k).min() < 5e-5:
            continue
        errs.append(check_pair_gradients(
            lambda zi, zo, y=y, params=params: cosine_margin_ranking_loss(
                zi, y, zo, params
            ),
            z_in, z_out,
        ))
        done += 1
    worst["cosine_margin_ranking"] = max(errs)

    errs = []
    for _ in range(100):
        n, k = random_shapes()
        z_in = rng.normal(size=(n, k)) * 2.0
        z_out = rng.normal(size=(n, k)) * 2.0
        y = rng.integers(0, k, size=n)
        lam = float(rng.uniform(0.0, 2.0))
        errs.append(check_pair_gradients(
            lambda zi, zo, y=y, lam=lam: outlier_exposure_loss(zi, y, zo, lam),
            z_in, z_out,
        ))
    worst["outlier_exposure"] = max(errs)

    for name, err in worst.items():
        print(f"gradient oracle {name}: max rel err {err:.3e}")
        assert err <= 1e-4, name


def test_criterion_04_auc_oracle():
    assert auc_roc([0.9, 0.4], [0.5, 0.1], orientation="higher_id") == 0.75

    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 51))
        m = int(rng.integers(2, 51))
        a = np.round(rng.normal(size=n), 1)
        b = np.round(rng.normal(size=m) + 0.3, 1)
        a[: max(1, n // 4)] = a[0]  # forced duplicates on top of tie rounding
        b[: max(1, m // 4)] = a[0]
        fast = auc_roc(a, b, orientation="higher_ood")
        brute = sum(
            1.0 if bb > aa else (0.5 if bb == aa else 0.0)
            for aa in a for bb in b
        ) / (n * m)
        worst = max(worst, abs(fast - brute))
    print(f"auc oracle: max |rank - bruteforce| = {worst:.3e}")
    assert worst <= 1e-12


def test_criterion_05_triplet_regimes():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        dim = int(rng.integers(2, 9))
        anchor = rng.normal(size=dim)
        pos = rng.normal(size=dim)
        neg = rng.normal(size=dim)
        gamma = float(rng.uniform(0.0, 1.5))
        loss, regime = triplet_ranking_loss(anchor, pos, neg, gamma)
        d_pos = float(np.linalg.norm(anchor - pos))
        d_neg = float(np.linalg.norm(anchor - neg))
        if d_neg > d_pos + gamma:
            expected = "easy"
        elif d_neg < d_pos:
            expected = "hard"
        else:
            expected = "semi_hard"
        assert regime == expected
        assert loss == max(0.0, gamma + d_pos - d_neg)


def test_criterion_06_mahalanobis_identity_reduction():
    rng = np.random.default_rng(3)
    dim, classes = 4, 3
    means = rng.normal(size=(classes, dim)) * 2.0
    detector = MahalanobisDetector(means, np.eye(dim))
    points = rng.normal(size=(100, dim)) * 3.0
    scores = mahalanobis_score(detector, points)
    nearest = np.min(
        ((points[:, None, :] - means[None, :, :]) ** 2).sum(axis=2), axis=1
    )
    np.testing.assert_allclose(scores, -nearest, atol=1e-9)


def test_criterion_07_reduction_laws():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n, k = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        z_in = rng.normal(size=(n, k)) * 2.0
        z_out = rng.normal(size=(n, k)) * 2.0
        y = rng.integers(0, k, size=n)
        ce = cross_entropy_loss(z_in, y)
        for reduced in (
            ce_cosine_loss(z_in, y, z_out, 0.0),
            outlier_exposure_loss(z_in, y, z_out, 0.0),
        ):
            assert reduced.loss == ce.loss
            np.testing.assert_array_equal(reduced.d_logits_in, ce.d_logits_in)
            np.testing.assert_array_equal(
                reduced.d_logits_out, np.zeros_like(z_out)
            )


def test_criterion_08_mce_formula():
    ladder = {s: 10.0 * s for s in SEVERITIES}  # 10/20/30/40/50 -> mean 30
    flat = {s: 0.0 for s in SEVERITIES}
    one_kind = {k: (ladder if k == "rotate" else flat) for k in CORRUPTION_KINDS}
    assert mce(one_kind) == 30.0
    two_kinds = {
        k: (ladder if k in ("rotate", "scale") else flat)
        for k in CORRUPTION_KINDS
    }
    assert mce(two_kinds) == 60.0
    rng = np.random.default_rng(5)
    table = {
        k: {s: float(rng.uniform(0.0, 50.0)) for s in SEVERITIES}
        for k in CORRUPTION_KINDS
    }
    doubled = {k: {s: 2.0 * v for s, v in row.items()} for k, row in table.items()}
    assert mce(doubled) == 2.0 * mce(table)


def test_criterion_09_corruption_direction(seeded_runs):
    mean_ce = float(np.mean(seeded_runs["mce"]["ce"]))
    mean_cos = float(np.mean(seeded_runs["mce"]["ce_cosine"]))
    print(f"mean mCE: ce={mean_ce:.2f} ce_cosine={mean_cos:.2f}")
    assert mean_cos < mean_ce


def test_criterion_10_cli_determinism(tmp_path):
    from oodkit.cli import main

    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "config_version": 1,
        "data": {"n_per_class": 40, "n_per_ood_component": 40},
        "train": {"objective": "ce_cosine", "epochs": 3, "lam": 1.0},
    }) + "\n")
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({
        "grid_version": 1, "grid": [{"lam": 0.5}, {"lam": 1.0}],
    }) + "\n")

    # every command reruns against the same inputs into a fresh directory
    data = tmp_path / "data"
    model = tmp_path / "train-a" / "model.json"
    commands = {
        "gen-data": ["gen-data", "--config", str(config)],
        "train": ["train", "--config", str(config), "--data", str(data)],
        "eval": ["eval", "--model", str(model), "--data", str(data),
                 "--grid-resolution", "16", "--histogram-bins", "6"],
        "corrupt-eval": ["corrupt-eval", "--model", str(model),
                         "--data", str(data)],
        "sweep": ["sweep", "--config", str(config), "--grid", str(grid),
                  "--data", str(data)],
    }
    assert main(commands["gen-data"] + ["--out", str(data)]) == 0
    assert main(commands["train"] + ["--out", str(tmp_path / "train-a")]) == 0

    compared = 0
    for name, argv in commands.items():
        first = tmp_path / f"{name}-a"
        second = tmp_path / f"{name}-b"
        if name not in ("train",):  # train-a already exists as model input
            assert main(argv + ["--out", str(first)]) == 0
        assert main(argv + ["--out", str(second)]) == 0
        files_a = sorted(p.name for p in first.iterdir())
        assert files_a == sorted(p.name for p in second.iterdir())
        for fname in files_a:
            if fname == "manifest.json":
                continue  # sole carrier of the wall-clock timestamp
            assert (first / fname).read_bytes() == (
                second / fname
            ).read_bytes(), (name, fname)
            compared += 1
    assert compared >= 15
