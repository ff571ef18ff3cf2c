"""SGD training loop for the classifier in plain, soft-label and outlier-exposure modes.

Random streams, all keyed by ``config.seed``:

* initialization: ``derive_seed(seed, STREAM_INIT)``
* batch order in epoch ``e``: ``make_rng(seed, STREAM_SHUFFLE, e)``
* crop/flip of sample ``i`` in epoch ``e``: ``make_rng(seed, STREAM_AUGMENT, e, i)``
* mixed sampler for that visit: seed ``derive_seed(seed, STREAM_ALGORITHM, e, i)``
* outlier order in epoch ``e``: ``make_rng(seed, STREAM_OUTLIER, e)``

Plain mode and soft mode share every stream, so soft mode with gamma = 0
retraces plain mode exactly.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import FormatError, ShapeError
from .nnet import Classifier, sgd_step
from .rng import (
    STREAM_ALGORITHM,
    STREAM_AUGMENT,
    STREAM_INIT,
    STREAM_OUTLIER,
    STREAM_SHUFFLE,
    derive_seed,
    make_rng,
)
from .softlabel import draw_training_sample

MODES = ("plain", "soft", "oe")
PAD = 4


@dataclass
class TrainConfig:
    mode: str = "plain"
    gamma: float = 0.2
    epochs: int = 15
    batch_size: int = 32
    lr: float = 0.02
    milestones: tuple = (0.5, 0.75)
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    oe_lambda: float = 0.5
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.oe_lambda < 0:
            raise ValueError("oe_lambda must be non-negative")
        self.milestones = tuple(float(m) for m in self.milestones)
        if any(not 0.0 < m < 1.0 for m in self.milestones):
            raise ValueError("milestones are fractions of the run in (0, 1)")

    def lr_at(self, epoch):
        """Step schedule: lr times lr_factor per milestone reached."""
        passed = sum(epoch >= int(m * self.epochs) for m in self.milestones)
        return self.lr * self.lr_factor**passed

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep or key not in kinds:
                raise FormatError(f"unknown config line {raw!r}", line=lineno)
            try:
                values[key] = _parse_field(kinds[key], value)
            except ValueError as exc:
                raise FormatError(f"bad value for {key}: {exc}", line=lineno) from None
        return cls(**values)


def _parse_field(kind, value):
    if kind is bool:
        if value not in ("True", "False"):
            raise ValueError(value)
        return value == "True"
    if kind is tuple:
        return tuple(float(v) for v in value.split(",") if v.strip())
    if kind is str:
        return value
    return kind(value)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float
    test_accuracy: float = float("nan")


LOG_HEADER = "epoch,loss,train_accuracy,test_accuracy"


def format_log(records):
    rows = [LOG_HEADER]
    for r in records:
        rows.append(f"{r.epoch},{r.loss:.6f},{r.train_accuracy:.6f},{r.test_accuracy:.6f}")
    return "\n".join(rows) + "\n"


def augment(image, rng):
    """Random crop of the zero-padded image plus a coin-flip horizontal mirror."""
    dy, dx = rng.integers(0, 2 * PAD + 1, size=2)
    flip = rng.random() < 0.5
    c, h, w = image.shape
    padded = np.zeros((c, h + 2 * PAD, w + 2 * PAD), dtype=image.dtype)
    padded[:, PAD:PAD + h, PAD:PAD + w] = image
    out = padded[:, dy:dy + h, dx:dx + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def _id_batch(dataset, idx, epoch, config, table, params):
    k = dataset.class_count
    images = np.empty((len(idx),) + dataset.images.shape[1:], dtype=np.float32)
    targets = np.zeros((len(idx), k), dtype=np.float32)
    for row, i in enumerate(idx):
        img = dataset.images[i]
        if config.augment:
            img = augment(img, make_rng(config.seed, STREAM_AUGMENT, epoch, i))
        label = int(dataset.labels[i])
        if config.mode == "soft":
            img, target = draw_training_sample(
                img, label, config.gamma, table, derive_seed(config.seed, STREAM_ALGORITHM, epoch, i), params
            )
            targets[row] = target.probs
        else:
            targets[row, label] = 1.0
        images[row] = img
    return images, targets


def train(dataset, config, table=None, outliers=None, test=None, params=None, history=None, model=None):
    """Train a fresh classifier on ``dataset`` and return it.

    ``table`` (AccuracyTable) is required in soft mode and ``outliers``
    (images with no labels needed) in oe mode. When ``history`` is a list,
    one EpochRecord per epoch is appended; test accuracy is filled in only
    if ``test`` is given. ``params`` overrides the corruption severities.
    """
    if len(dataset) == 0:
        raise ShapeError("cannot train on an empty dataset")
    if config.mode == "soft":
        if table is None:
            raise ValueError("soft mode needs an accuracy table")
        if table.class_count != dataset.class_count:
            raise ShapeError(f"table has K={table.class_count} but dataset has K={dataset.class_count}")
    ood = None
    if config.mode == "oe":
        if outliers is None:
            raise ValueError("oe mode needs an outlier dataset")
        ood = np.asarray(getattr(outliers, "images", outliers), dtype=np.float32)
        if len(ood) == 0:
            raise ShapeError("outlier set is empty")
    if model is None:
        model = Classifier.initialize(dataset.class_count, derive_seed(config.seed, STREAM_INIT))
    k = dataset.class_count
    n = len(dataset)
    velocity = None
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = make_rng(config.seed, STREAM_SHUFFLE, epoch).permutation(n)
        ood_order = make_rng(config.seed, STREAM_OUTLIER, epoch).permutation(len(ood)) if ood is not None else None
        loss_sum = 0.0
        hits = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            images, targets = _id_batch(dataset, idx, epoch, config, table, params)
            weights = np.full(len(idx), 1.0 / len(idx))
            if ood is not None:
                pick = ood_order[np.arange(start, start + len(idx)) % len(ood)]
                images = np.concatenate([images, ood[pick]])
                targets = np.concatenate([targets, np.full((len(idx), k), 1.0 / k, dtype=np.float32)])
                weights = np.concatenate([weights, np.full(len(idx), config.oe_lambda / len(idx))])
            loss, grads, probs = model.loss_and_grads(images, targets, weights)
            velocity = sgd_step(model, grads, lr, config.momentum, config.weight_decay, velocity)
            loss_sum += loss * len(idx)
            hits += int(np.sum(probs[:len(idx)].argmax(axis=1) == dataset.labels[idx]))
        if history is not None:
            test_acc = float("nan")
            if test is not None:
                test_acc = float(np.mean(model.predict(test.images, batch_size=32) == test.labels))
            history.append(EpochRecord(epoch + 1, loss_sum / n, hits / n, test_acc))
    return model
