import numpy as np
import pytest

from oodbridge import softlabel
from oodbridge.corruptions import NUM_SPECS, CorruptionSpec, SeverityParams
from oodbridge.data_io import LabeledDataset
from oodbridge.errors import CompletenessError, ShapeError
from oodbridge.softlabel import AccuracyTable, make_soft_label, nearest_accuracy
from oracles import voronoi_masses


def _table(accs, k=10, active=None):
    full = np.ones(NUM_SPECS)
    full[: len(accs)] = accs
    if active is None:
        active = np.arange(NUM_SPECS) < len(accs)
    return AccuracyTable(full, k, "test", 0, active)


def test_soft_label_examples():
    assert np.array_equal(make_soft_label(1.0, 0, 3).probs, [1, 0, 0])
    assert np.allclose(make_soft_label(1 / 3, 2, 3).probs, [1 / 3] * 3)
    assert np.allclose(make_soft_label(0.6, 1, 3).probs, [0.2, 0.6, 0.2])


def test_soft_label_endpoints_exact():
    for k in (2, 3, 7, 10, 49, 100):
        hard = make_soft_label(1.0, k - 1, k).probs
        assert np.array_equal(hard, np.eye(k)[k - 1])
        uni = make_soft_label(1 / k, 0, k).probs
        assert np.array_equal(uni, np.full(k, 1 / k))


@pytest.mark.parametrize("args", [(1.2, 0, 3), (-0.1, 0, 3), (0.5, 3, 3), (0.5, 0, 1)])
def test_soft_label_rejects(args):
    with pytest.raises(ValueError):
        make_soft_label(*args)


def test_soft_label_monotone():
    lo, hi = make_soft_label(0.4, 1, 5).probs, make_soft_label(0.7, 1, 5).probs
    assert hi[1] > lo[1]
    assert np.all(np.delete(hi, 1) < np.delete(lo, 1))


def test_nearest_examples():
    assert nearest_accuracy(0.55, [0.9, 0.5, 0.2]) == 1
    assert nearest_accuracy(0.7, [0.9, 0.5]) == 0


def test_nearest_matches_scan():
    """Exhaustive argmin in exact integer hundredths; two-digit values make ties common."""
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        cents = rng.integers(0, 101, rng.integers(1, 12))
        alpha = int(rng.integers(10, 101))
        best = min(range(len(cents)), key=lambda i: (abs(int(cents[i]) - alpha), i))
        assert nearest_accuracy(alpha / 100, cents / 100) == best


def test_nearest_respects_active_mask():
    table = _table([0.9, 0.5, 0.2], active=np.arange(NUM_SPECS) == 2)
    assert nearest_accuracy(0.9, table) == 2


def test_table_validation_and_restrict():
    with pytest.raises(CompletenessError):
        AccuracyTable(np.ones(74), 10)
    with pytest.raises(ValueError):
        AccuracyTable(np.full(NUM_SPECS, 1.5), 10)
    t = AccuracyTable(np.linspace(0, 1, NUM_SPECS), 10)
    r = t.restrict(["gaussian_noise", "13"])
    assert r.active.sum() == 10
    assert r.active[:5].all() and r.active[65:70].all()
    assert t.accuracy(CorruptionSpec("contrast", 2)) == pytest.approx(t.accuracies[56])


def test_gamma_zero_is_identity():
    image = np.random.default_rng(1).random((3, 32, 32)).astype(np.float32)
    table = _table([0.1, 0.5])
    for seed in range(50):
        out, target = softlabel.draw_training_sample(image, 3, 0.0, table, seed)
        assert out is image
        assert target.kind == "hard" and target.probs[3] == 1.0


def test_gamma_one_always_soft():
    image = np.random.default_rng(2).random((3, 32, 32)).astype(np.float32)
    table = _table([0.3, 0.6, 0.95], k=4)
    for seed in range(20):
        out, target = softlabel.draw_training_sample(image, 1, 1.0, table, seed)
        assert target.kind == "soft"
        assert target.max_prob in (0.3, 0.6, 0.95)
        assert target.probs[1] == table.accuracies[target.spec_index]
        assert abs(target.probs.sum() - 1) < 1e-6
        assert out.shape == image.shape and not np.array_equal(out, image)


def test_draw_is_deterministic():
    image = np.random.default_rng(3).random((3, 32, 32)).astype(np.float32)
    table = _table([0.2, 0.7])
    a = softlabel.draw_training_sample(image, 0, 0.5, table, 99)
    b = softlabel.draw_training_sample(image, 0, 0.5, table, 99)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1].probs, b[1].probs)


def test_voronoi_frequencies_small():
    accs = [0.1, 0.325, 0.55, 0.775, 1.0]
    table = _table(accs)
    image = np.zeros((3, 32, 32), np.float32)
    counts = np.zeros(NUM_SPECS)
    for seed in range(3000):
        counts[softlabel.draw_training_sample(image, 0, 1.0, table, seed)[1].spec_index] += 1
    assert np.abs(counts[:5] / 3000 - voronoi_masses(accs, 0.1)).max() < 0.03


class _Constant:
    class_count = 10

    def predict(self, images, batch_size=None):
        return np.zeros(len(images), dtype=int)


class _Oracle:
    """Knows the label of every image in one fixed dataset."""

    class_count = 3

    def __init__(self, dataset):
        self.lookup = {img.tobytes(): lab for img, lab in zip(dataset.images, dataset.labels)}

    def predict(self, images, batch_size=None):
        return np.array([self.lookup.get(np.asarray(im, np.float32).tobytes(), -1) for im in images])


def _dataset(n, k, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.random((n, 3, 32, 32)), np.arange(n) % k, k)


def test_constant_model_table():
    ds = _dataset(20, 10)
    specs = [CorruptionSpec("brightness", 1), CorruptionSpec("contrast", 5)]
    t = softlabel.compute_accuracy_table(_Constant(), ds, specs, seed=1)
    assert t.accuracies[specs[0].index] == pytest.approx(0.1)
    assert t.accuracies[specs[1].index] == pytest.approx(0.1)
    assert t.active.sum() == 2


def test_identity_params_give_perfect_accuracy():
    ds = _dataset(9, 3)
    zero = SeverityParams({("gaussian_noise", s): [0.0] for s in range(1, 6)})
    specs = [CorruptionSpec("gaussian_noise", s) for s in range(1, 6)]
    t = softlabel.compute_accuracy_table(_Oracle(ds), ds, specs, params=zero)
    assert np.all(t.accuracies[:5] == 1.0)


def test_table_errors():
    with pytest.raises(ShapeError):
        softlabel.compute_accuracy_table(_Constant(), _dataset(0, 10))
    with pytest.raises(ShapeError):
        softlabel.compute_accuracy_table(_Constant(), _dataset(5, 3))
