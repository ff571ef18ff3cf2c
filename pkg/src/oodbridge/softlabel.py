"""Per-transformation accuracies, soft targets and mixed training-sample draws.

A classifier trained on clean data is evaluated on each corrupted copy of
the training set; the resulting accuracy becomes the true-class mass of
the soft target used for that transformation. During retraining each
sample is, with probability ``gamma``, replaced by a corrupted version
whose accuracy is closest to a uniform draw from [1/K, 1].
"""

from dataclasses import dataclass, field

import numpy as np

from .corruptions import NUM_SPECS, CorruptionSpec, apply_corruption, corrupt_images, family_from_name
from .errors import CompletenessError, ShapeError
from .rng import derive_seed, make_rng

HARD = "hard"
SOFT = "soft"
UNIFORM = "uniform"
TIE_TOLERANCE = 1e-12


@dataclass
class TargetDistribution:
    probs: np.ndarray
    kind: str = HARD
    spec_index: int = None

    @property
    def max_prob(self):
        return float(self.probs.max())


def hard_label(true_class, class_count):
    probs = np.zeros(class_count)
    probs[true_class] = 1.0
    return TargetDistribution(probs, HARD)


def uniform_label(class_count):
    return TargetDistribution(np.full(class_count, 1.0 / class_count), UNIFORM)


def make_soft_label(accuracy, true_class, class_count, spec_index=None):
    """``accuracy`` on the true class, the rest spread evenly over the others."""
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError(f"accuracy must lie in [0, 1], got {accuracy}")
    if class_count < 2:
        raise ValueError("need at least two classes")
    if not 0 <= true_class < class_count:
        raise ValueError(f"true_class must be in 0..{class_count - 1}, got {true_class}")
    off = (1.0 - accuracy) / (class_count - 1)
    if accuracy == 1.0 / class_count:
        off = accuracy  # the division above can miss 1/K by one ulp
    probs = np.full(class_count, off)
    probs[true_class] = accuracy
    return TargetDistribution(probs, SOFT, spec_index)


@dataclass
class AccuracyTable:
    """Accuracy of the clean model under each of the 75 transformations.

    ``active`` marks the entries that may be chosen when drawing samples;
    restricting it is how corruption-subset ablations are run.
    """

    accuracies: np.ndarray
    class_count: int
    dataset_id: str = "unknown"
    seed: int = 0
    active: np.ndarray = field(default=None)

    def __post_init__(self):
        self.accuracies = np.asarray(self.accuracies, dtype=np.float64)
        if self.accuracies.shape != (NUM_SPECS,):
            raise CompletenessError(f"need {NUM_SPECS} accuracies, got {self.accuracies.shape}")
        if not ((self.accuracies >= 0) & (self.accuracies <= 1)).all():
            raise ValueError("accuracies must lie in [0, 1]")
        if self.active is None:
            self.active = np.ones(NUM_SPECS, dtype=bool)
        self.active = np.asarray(self.active, dtype=bool)
        if not self.active.any():
            raise ValueError("at least one table entry must be active")

    def accuracy(self, spec):
        return float(self.accuracies[spec.index])

    def restrict(self, families):
        """Copy whose active entries are the given families at all severities."""
        names = {family_from_name(f) for f in families}
        mask = np.array([CorruptionSpec.from_index(i).family in names for i in range(NUM_SPECS)])
        return AccuracyTable(self.accuracies.copy(), self.class_count, self.dataset_id, self.seed, mask)

    def __eq__(self, other):
        return (
            isinstance(other, AccuracyTable)
            and np.array_equal(self.accuracies, other.accuracies)
            and np.array_equal(self.active, other.active)
            and (self.class_count, self.dataset_id, self.seed) == (other.class_count, other.dataset_id, other.seed)
        )


def nearest_accuracy(alpha, table):
    """Index of the active entry whose accuracy is closest to ``alpha``; ties go to the lowest index.

    ``table`` may be an AccuracyTable or a plain sequence of accuracies.
    """
    if isinstance(table, AccuracyTable):
        accs = table.accuracies
        active = table.active
    else:
        accs = np.asarray(table, dtype=np.float64)
        active = np.ones(len(accs), dtype=bool)
    dist = np.where(active, np.abs(accs - alpha), np.inf)
    # distances equal up to round-off (0.9 vs 0.5 around 0.7) count as ties
    return int(np.flatnonzero(dist <= dist.min() + TIE_TOLERANCE)[0])


def draw_training_sample(image, true_class, gamma, table, seed, params=None):
    """One draw of the mixed sampler; returns (image, TargetDistribution).

    Randomness: Bernoulli(gamma) and alpha ~ U[1/K, 1] come from the stream
    ``seed``; the corruption uses ``derive_seed(seed, 1)``.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    k = table.class_count
    rng = make_rng(seed)
    if not rng.random() < gamma:
        return image, hard_label(true_class, k)
    alpha = rng.uniform(1.0 / k, 1.0)
    index = nearest_accuracy(alpha, table)
    spec = CorruptionSpec.from_index(index)
    corrupted = apply_corruption(image, spec, derive_seed(seed, 1), params)
    return corrupted, make_soft_label(table.accuracies[index], true_class, k, index)


def compute_accuracy_table(model, dataset, specs=None, seed=0, params=None, workers=1, batch_size=500):
    """Accuracy of ``model`` on each corrupted copy of ``dataset``.

    Spec ``i`` corrupts the data with seed ``derive_seed(seed, i)``. Specs not
    listed keep accuracy 1.0 and are marked inactive.
    """
    if len(dataset) == 0:
        raise ShapeError("cannot calibrate on an empty dataset")
    if model.class_count != dataset.class_count:
        raise ShapeError(
            f"model predicts {model.class_count} classes but dataset has {dataset.class_count}"
        )
    if specs is None:
        specs = [CorruptionSpec.from_index(i) for i in range(NUM_SPECS)]
    accs = np.ones(NUM_SPECS)
    active = np.zeros(NUM_SPECS, dtype=bool)
    for spec in specs:
        images = corrupt_images(dataset.images, spec, derive_seed(seed, spec.index), params, workers)
        pred = model.predict(images, batch_size=batch_size)
        accs[spec.index] = float(np.mean(pred == dataset.labels))
        active[spec.index] = True
    return AccuracyTable(accs, dataset.class_count, dataset.identifier, seed, active)
