"""
Test fusion, the weight grid, temperature calibration and ablations.
"""

import csv
import math
from fractions import Fraction

import numpy as np
import pytest
from conftest import one_hot_set

from cattle_ensemble.ensemble import (
    ABLATIONS,
    AblationConfig,
    _fusion_nll_and_grad,
    _temperature_nll_grad,
    apply_ablation,
    calibrate_fused,
    enumerate_grid,
    fit_fusion_weights,
    fit_temperature,
    fuse,
    grid_search_weights,
    load_fusion_config,
    nll,
    run_fusion,
    save_fusion_config,
    temperature_scale,
    write_grid_csv,
)
from cattle_ensemble.labels import ClassLabel, argmax_index, softmax
from cattle_ensemble.optim import numerical_gradient
from cattle_ensemble.predictions import PredictionError, PredictionSet, ScoreKind
from cattle_ensemble.pydantic_models import BASE_MODELS, FusionConfig, ModelName

VGG, RESNET, INCEPTION = BASE_MODELS


def prob_set(model, ids, probs):
    return PredictionSet(model, ScoreKind.PROBS, tuple(ids), np.asarray(probs, dtype=np.float64))


def random_models(seed, n=40):
    rng = np.random.default_rng(seed)
    ids = [f"x{i}" for i in range(n)]
    labels = {i: ClassLabel(int(rng.integers(6))) for i in ids}
    models = [prob_set(m, ids, rng.dirichlet(np.ones(6) * 0.5, size=n)) for m in BASE_MODELS]
    return models, labels


def brute_force_grid():
    points = []
    for a in range(2, 11):
        for b in range(2, 11):
            for c in range(2, 11):
                if a + b + c == 20:
                    points.append((Fraction(a, 20), Fraction(b, 20), Fraction(c, 20)))
    return points


def test_grid_enumeration():
    grid = enumerate_grid()
    assert len(grid) == 57
    assert list(grid) == brute_force_grid()
    assert all(sum(p) == 1 for p in grid)
    assert (0.30, 0.30, 0.40) in grid
    assert (1 / 3, 1 / 3, 1 / 3) not in grid
    assert grid.points[0] == (Fraction(1, 10), Fraction(2, 5), Fraction(1, 2))
    assert grid.points == tuple(sorted(grid.points))


def test_grid_overrides():
    assert len(enumerate_grid("0.0", "1.0", "0.5")) == 6
    with pytest.raises(ValueError):
        enumerate_grid(0.1, 0.5, 0.03)


def test_fuse_one_hot():
    models = [one_hot_set(m, ["a"], [ClassLabel(k)]) for k, m in enumerate(BASE_MODELS)]
    fused = fuse(models, (0.3, 0.3, 0.4))
    assert fused.model is ModelName.ENSEMBLE
    assert fused.scores[0] == pytest.approx([0.3, 0.3, 0.4, 0, 0, 0])


def test_fuse_fixed_point_and_degenerate_weights():
    rng = np.random.default_rng(2)
    p = rng.dirichlet(np.ones(6), size=5)
    ids = [f"i{k}" for k in range(5)]
    same = [prob_set(m, ids, p) for m in BASE_MODELS]
    assert fuse(same, (0.15, 0.35, 0.5)).scores == pytest.approx(p)
    models, _ = random_models(3, 5)
    assert np.array_equal(fuse(models, (1, 0, 0)).scores, models[0].scores)


def test_fuse_aligns_ids():
    models, _ = random_models(4, 6)
    shuffled = models[1].reindex(tuple(reversed(models[1].ids)))
    a = fuse(models, (0.3, 0.3, 0.4))
    b = fuse([models[0], shuffled, models[2]], (0.3, 0.3, 0.4))
    assert np.array_equal(a.scores, b.scores)


def test_fuse_logits_softmaxed():
    z = np.array([[2.0, 1.0, 0, 0, 0, 0]])
    logits = PredictionSet(VGG, ScoreKind.LOGITS, ("a",), z)
    probs = prob_set(RESNET, ["a"], softmax(z))
    third = prob_set(INCEPTION, ["a"], softmax(z))
    assert fuse([logits, probs, third], (0.2, 0.3, 0.5)).scores == pytest.approx(softmax(z))


def test_fuse_id_mismatch():
    a = one_hot_set(VGG, ["s1", "s2"], [ClassLabel.FMD_FOOT] * 2)
    b = one_hot_set(RESNET, ["s2", "s3"], [ClassLabel.FMD_FOOT] * 2)
    c = one_hot_set(INCEPTION, ["s1", "s2"], [ClassLabel.FMD_FOOT] * 2)
    with pytest.raises(PredictionError) as err:
        fuse([a, b, c], (0.3, 0.3, 0.4))
    assert "s1" in str(err.value)
    assert "s3" in str(err.value)


def test_fuse_bad_weights():
    models, _ = random_models(5, 3)
    with pytest.raises(ValueError):
        fuse(models, (0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        fuse(models, (1.2, -0.2, 0.0))


def test_fuse_always_valid():
    rng = np.random.default_rng(6)
    for seed in range(20):
        models, _ = random_models(seed, 10)
        w = rng.dirichlet(np.ones(3))
        fused = fuse(models, (w[0], w[1], 1.0 - w[0] - w[1]))
        assert np.all(fused.scores >= 0)
        assert fused.scores.sum(axis=1) == pytest.approx(np.ones(10), abs=1e-12)


def test_temperature_scale():
    z = [2.0, 1.0, 0.0, 0.0, 0.0, 0.0]
    assert temperature_scale(z, 1.0) == pytest.approx(softmax(z), abs=1e-15)
    p = temperature_scale(z, 0.8)
    denom = math.exp(2.5) + math.exp(1.25) + 4
    assert p[0] == pytest.approx(math.exp(2.5) / denom, abs=1e-12)
    assert p[0] == pytest.approx(0.6193, abs=1e-4)
    assert p[1] == pytest.approx(0.1774, abs=1e-4)
    assert p[2] == pytest.approx(0.0508, abs=1e-4)
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            temperature_scale(z, bad)


def test_temperature_preserves_argmax():
    rng = np.random.default_rng(8)
    z = rng.normal(size=(10000, 6)) * 3
    tied = rng.normal(size=(600, 6))
    first = np.arange(600) % 5
    second = first + 1 + rng.integers(0, 5 - first)
    peak = tied.max(axis=1) + 0.5
    tied[np.arange(600), first] = peak
    tied[np.arange(600), second] = peak
    assert np.array_equal(argmax_index(tied), first)
    for t in list(np.linspace(0.5, 2.0, 31)) + [0.1, 10.0]:
        assert np.array_equal(argmax_index(temperature_scale(z, t)), argmax_index(z))
        assert np.array_equal(argmax_index(temperature_scale(tied, t)), first)


def test_calibrate_fused():
    models, _ = random_models(9, 30)
    fused = fuse(models, (0.3, 0.3, 0.4))
    assert calibrate_fused(fused, 1.0).scores == pytest.approx(fused.scores, abs=1e-9)
    uniform = prob_set(ModelName.ENSEMBLE, ["u"], [[1 / 6] * 6])
    assert calibrate_fused(uniform, 0.8).scores[0] == pytest.approx([1 / 6] * 6)
    peaked = prob_set(ModelName.ENSEMBLE, ["p"], [[0.5, 0.3, 0.05, 0.05, 0.05, 0.05]])
    assert calibrate_fused(peaked, 0.8).scores[0, 0] > 0.5


def favor_inception(n=100, share=0.4):
    """InceptionV3 alone is right on ``share`` of the samples; elsewhere all agree."""
    ids = [f"v{i:03d}" for i in range(n)]
    truth = [ClassLabel(i % 6) for i in range(n)]
    hard = int(n * share)
    vgg = [ClassLabel((int(t) + 1) % 6) if i < hard else t for i, t in enumerate(truth)]
    resnet = [ClassLabel((int(t) + 2) % 6) if i < hard else t for i, t in enumerate(truth)]
    models = [one_hot_set(VGG, ids, vgg), one_hot_set(RESNET, ids, resnet), one_hot_set(INCEPTION, ids, truth)]
    return models, dict(zip(ids, truth))


def oracle_accuracy(models, labels, weights):
    correct = 0
    for n, sample_id in enumerate(models[0].ids):
        p = [sum(float(w) * m.scores[n][k] for w, m in zip(weights, models)) for k in range(6)]
        correct += p.index(max(p)) == int(labels[sample_id])
    return correct / len(labels)


def test_grid_search_favors_inception():
    models, labels = favor_inception()
    result = grid_search_weights(models, labels)
    assert result.best[2] == Fraction(1, 2)
    assert result.best == (Fraction(1, 10), Fraction(2, 5), Fraction(1, 2))
    assert result.best_accuracy == 1.0
    assert len(result.scores) == 57


def test_grid_search_ties():
    ids = [f"t{i}" for i in range(12)]
    classes = [ClassLabel(i % 6) for i in range(12)]
    models = [one_hot_set(m, ids, classes) for m in BASE_MODELS]
    result = grid_search_weights(models, dict(zip(ids, classes)))
    assert len({p.correct for p in result.scores}) == 1
    assert result.best == (Fraction(1, 10), Fraction(2, 5), Fraction(1, 2))


def test_grid_search_single_sample():
    models = [
        one_hot_set(VGG, ["s"], [ClassLabel.LSD_SKIN]),
        one_hot_set(RESNET, ["s"], [ClassLabel.FMD_FOOT]),
        one_hot_set(INCEPTION, ["s"], [ClassLabel.FMD_MOUTH]),
    ]
    labels = {"s": ClassLabel.LSD_SKIN}
    result = grid_search_weights(models, labels)
    best = max(oracle_accuracy(models, labels, p) for p in enumerate_grid())
    assert result.best_accuracy == best
    assert oracle_accuracy(models, labels, result.best) == best


def test_grid_search_matches_brute_force():
    models, labels = random_models(10, 60)
    result = grid_search_weights(models, labels)
    oracle = [oracle_accuracy(models, labels, p) for p in brute_force_grid()]
    assert [p.accuracy for p in result.scores] == pytest.approx(oracle)
    assert result.best == brute_force_grid()[oracle.index(max(oracle))]
    assert grid_search_weights(models, labels) == result


def test_grid_search_empty():
    models = [PredictionSet(m, ScoreKind.PROBS, (), np.zeros((0, 6))) for m in BASE_MODELS]
    with pytest.raises(ValueError):
        grid_search_weights(models, {})


def test_grid_csv(tmp_path):
    models, labels = favor_inception()
    write_grid_csv(grid_search_weights(models, labels), tmp_path / "grid.csv")
    with open(tmp_path / "grid.csv") as infh:
        rows = list(csv.reader(infh))
    assert rows[0] == ["w1", "w2", "w3", "metric"]
    assert len(rows) == 58
    assert rows[1] == ["0.10", "0.40", "0.50", "1.000000"]


def test_apply_ablation():
    base = FusionConfig(weights=(0.3, 0.3, 0.4), temperature=0.8)
    dropped = apply_ablation(AblationConfig(drop_model=VGG), base)
    assert dropped.weights == pytest.approx((0.0, 3 / 7, 4 / 7))
    assert dropped.temperature == 0.8
    assert apply_ablation(AblationConfig(), base) == base
    assert apply_ablation(AblationConfig(calibrate=False), base).temperature == 1.0
    with pytest.raises(ValueError):
        apply_ablation(AblationConfig(drop_model=VGG), FusionConfig(weights=(1.0, 0.0, 0.0)))
    assert [a.name for a in ABLATIONS] == [
        "full",
        "without-vgg16",
        "without-resnet50",
        "without-inceptionv3",
        "no-calibration",
    ]


def test_no_calibration_bypass():
    models, labels = random_models(11, 30)
    base = FusionConfig()
    uncalibrated = run_fusion(models, apply_ablation(AblationConfig(calibrate=False), base))
    assert np.array_equal(uncalibrated.calibrated.scores, fuse(models, base.weights).scores)
    full = run_fusion(models, base)
    assert np.array_equal(full.predicted, uncalibrated.predicted)
    assert [f.id for f in full] == list(models[0].ids)


def test_nll():
    probs = prob_set(ModelName.ENSEMBLE, ["a", "b"], [[0.5, 0.5, 0, 0, 0, 0], [0.25, 0.75, 0, 0, 0, 0]])
    labels = {"a": ClassLabel.FMD_FOOT, "b": ClassLabel.FMD_MOUTH}
    assert nll(probs, labels) == pytest.approx(-(math.log(0.5) + math.log(0.75)) / 2)


def test_temperature_gradient_check():
    rng = np.random.default_rng(12)
    z = np.log(rng.dirichlet(np.ones(6), size=50))
    y = rng.integers(0, 6, size=50)

    def loss(theta):
        q = softmax(z / theta[0])
        return float(-np.mean(np.log(q[np.arange(50), y])))

    for t in (0.6, 0.8, 1.3, 1.9):
        numeric = numerical_gradient(loss, [t])[0]
        assert _temperature_nll_grad(z, y, t) == pytest.approx(numeric, rel=1e-5, abs=1e-9)


def test_fusion_gradient_check():
    rng = np.random.default_rng(13)
    stack = rng.dirichlet(np.ones(6), size=(3, 40))
    y = rng.integers(0, 6, size=40)
    for _ in range(5):
        theta = rng.normal(size=3)
        numeric = numerical_gradient(lambda t: _fusion_nll_and_grad(stack, y, t)[0], theta)
        assert _fusion_nll_and_grad(stack, y, theta)[1] == pytest.approx(numeric, rel=1e-5, abs=1e-9)


def overconfident_fused(seed=14, n=400):
    rng = np.random.default_rng(seed)
    ids = [f"c{i}" for i in range(n)]
    y = rng.integers(0, 6, size=n)
    z = rng.normal(size=(n, 6)) * 2.0
    z[np.arange(n), y] += 2.0
    fused = prob_set(ModelName.ENSEMBLE, ids, softmax(z * 2.5))
    return fused, {i: ClassLabel(int(k)) for i, k in zip(ids, y)}


def test_fit_temperature_grid_is_best_grid_point():
    fused, labels = overconfident_fused()
    t = fit_temperature(fused, labels, method="grid")
    assert 0.5 <= t <= 2.0
    assert round(t * 20) == pytest.approx(t * 20)
    scores = {
        k / 20: nll(calibrate_fused(fused, k / 20), labels) for k in range(10, 41)
    }
    assert scores[t] == min(scores.values())


def test_fit_temperature_gradient_agrees_with_grid():
    fused, labels = overconfident_fused()
    grid = fit_temperature(fused, labels, method="grid")
    gradient = fit_temperature(fused, labels, method="gradient")
    assert gradient == pytest.approx(grid, abs=0.06)
    with pytest.raises(ValueError):
        fit_temperature(fused, labels, method="bisection")


def test_fit_fusion_weights_prefers_accurate_model():
    rng = np.random.default_rng(15)
    n = 300
    ids = [f"w{i}" for i in range(n)]
    y = rng.integers(0, 6, size=n)
    sharp = np.full((n, 6), 0.02)
    sharp[np.arange(n), y] = 0.9
    models = [
        prob_set(VGG, ids, rng.dirichlet(np.ones(6), size=n)),
        prob_set(RESNET, ids, rng.dirichlet(np.ones(6), size=n)),
        prob_set(INCEPTION, ids, sharp),
    ]
    labels = {i: ClassLabel(int(k)) for i, k in zip(ids, y)}
    weights, result = fit_fusion_weights(models, labels)
    assert sum(weights) == pytest.approx(1.0)
    assert weights[2] > weights[0]
    assert weights[2] > weights[1]
    uniform = nll(fuse(models, (1 / 3, 1 / 3, 1 / 3)), labels)
    assert result.val_loss < uniform


def test_fusion_config_files(tmp_path):
    default = load_fusion_config()
    assert default.weights == (0.3, 0.3, 0.4)
    assert default.temperature == 0.8
    cfg = FusionConfig(weights=(0.1, 0.4, 0.5), temperature=1.15)
    save_fusion_config(cfg, tmp_path / "fusion.json")
    assert load_fusion_config(tmp_path / "fusion.json") == cfg
    (tmp_path / "bad.json").write_text('{"weights": [0.5, 0.5, 0.5], "temperature": 0.8}')
    with pytest.raises(ValueError):
        load_fusion_config(tmp_path / "bad.json")
