import numpy as np
import pytest
from scipy import linalg

from latentlab.core import RngStream
from latentlab.errors import UsageError
from latentlab.harness.data import BACKGROUNDS, COLORS, SHAPES, SyntheticDataset
from latentlab.harness.probe import (
    NumericalError,
    Probe,
    chance_level,
    cond_consistency_score,
    eval_ffd,
    ffd_from_features,
    frechet_distance,
    load_probe,
    probe_accuracy,
    save_probe,
)


def scipy_frechet(mu1, s1, mu2, s2):
    covmean = linalg.sqrtm(s1 @ s2).real
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(s1 + s2 - 2 * covmean))


def test_identical_sets_give_zero():
    f = np.random.default_rng(0).standard_normal((500, 6))
    assert ffd_from_features(f, f) < 1e-6


def test_point_masses_give_squared_distance():
    d = np.array([3.0, -1.0, 0.5])
    assert frechet_distance(np.zeros(3), np.zeros((3, 3)), d, np.zeros((3, 3))) == pytest.approx(d @ d, rel=1e-6)


def test_gaussian_closed_form():
    rng = np.random.default_rng(1)
    k = 4
    A, B = rng.standard_normal((k, k)), rng.standard_normal((k, k))
    s1, s2 = A @ A.T + 0.5 * np.eye(k), B @ B.T + 0.5 * np.eye(k)
    mu1, mu2 = rng.standard_normal(k), rng.standard_normal(k)
    exact = scipy_frechet(mu1, s1, mu2, s2)
    assert frechet_distance(mu1, s1, mu2, s2, eps=0.0) == pytest.approx(exact, rel=1e-8)
    x = rng.multivariate_normal(mu1, s1, 10_000)
    y = rng.multivariate_normal(mu2, s2, 10_000)
    assert ffd_from_features(x, y) == pytest.approx(exact, rel=0.02)


def test_frechet_rejects_non_psd_and_tiny_sets():
    with pytest.raises(NumericalError):
        frechet_distance(np.zeros(2), -np.eye(2), np.zeros(2), np.eye(2))
    with pytest.raises(ValueError):
        ffd_from_features(np.zeros((1, 3)), np.zeros((5, 3)))


def test_chance_level_by_enumeration():
    nb, nt, nc = len(BACKGROUNDS), len(SHAPES), len(COLORS)
    ref = np.mean([(1 / nb + n * (1 / nt + 1 / nc)) / (1 + 2 * n) for n in (1, 2, 3)])
    assert chance_level() == pytest.approx(ref)


def test_probe_scores_real_and_shuffled(probe):
    assert probe.accuracy >= 0.95
    imgs, cond, attrs = SyntheticDataset(0).block(0, 2000)
    acc = probe_accuracy(probe, imgs, attrs)
    assert cond_consistency_score(probe, imgs, cond) == pytest.approx(acc, abs=0.02)
    _, other, _ = SyntheticDataset(9).block(0, 2000)
    assert cond_consistency_score(probe, imgs, other) == pytest.approx(chance_level(), abs=0.03)


def test_ffd_on_images(probe):
    a, _, _ = SyntheticDataset(0).block(0, 600)
    b, _, _ = SyntheticDataset(1).block(0, 600)
    assert eval_ffd(a, a, probe) < 1e-6
    noise = np.random.default_rng(0).integers(0, 256, a.shape, dtype=np.uint8)
    assert eval_ffd(a, noise, probe) > 10 * eval_ffd(a, b, probe)


def test_gate_refuses_untrained_probe():
    imgs, cond, _ = SyntheticDataset(0).block(0, 4)
    with pytest.raises(UsageError):
        cond_consistency_score(Probe(0), imgs, cond)


def test_probe_save_load(tmp_path, probe):
    loaded = load_probe(save_probe(probe, tmp_path / "p"))
    assert loaded.accuracy == probe.accuracy
    imgs, _, _ = SyntheticDataset(0).block(0, 8)
    np.testing.assert_array_equal(loaded.features(imgs), probe.features(imgs))
