"""The desk-scale experiment: plain vs soft-label training on synthetic data.

Four synthetic classes are generated; the first three are in-distribution
and the fourth, together with uniform-noise images, is the OOD set. For
each seed a plain model is trained, its accuracy table is computed on the
training set, and a soft-label model is trained from scratch with that
table. Both models are scored by predictive entropy.
"""

from dataclasses import dataclass

import numpy as np

from . import data_io, metrics
from .data_io import LabeledDataset, ScoreSet
from .nnet import checkpoint_bytes, entropy_score, msp_score
from .rng import derive_seed
from .softlabel import compute_accuracy_table
from .training import TrainConfig, train

ID_CLASSES = (0, 1, 2)
OOD_CLASS = 3

# data stream tags under the experiment seed
_TRAIN_DATA, _TEST_DATA, _NOISE_DATA = 11, 12, 13


@dataclass(frozen=True)
class DeskSetup:
    per_class: int = 40
    test_per_class: int = 300
    noise_count: int = 300
    epochs: int = 100
    lr: float = 0.02
    gamma: float = 0.2
    batch_size: int = 32

    def config(self, mode, seed):
        return TrainConfig(
            mode=mode, gamma=self.gamma, epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, seed=seed
        )


@dataclass
class DeskData:
    train: LabeledDataset
    test: LabeledDataset
    ood: dict  # source name -> images


def desk_data(seed, setup=DeskSetup()):
    train_all = data_io.synth_dataset(4, setup.per_class, seed=derive_seed(seed, _TRAIN_DATA), identifier="synth-train")
    test_all = data_io.synth_dataset(
        4, setup.test_per_class, seed=derive_seed(seed, _TEST_DATA), split="test", identifier="synth-test"
    )
    held_out = test_all.select_classes([OOD_CLASS], relabel=False).images
    noise = data_io.uniform_noise_images(setup.noise_count, derive_seed(seed, _NOISE_DATA))
    return DeskData(
        train_all.select_classes(ID_CLASSES),
        test_all.select_classes(ID_CLASSES),
        {"heldout_class": held_out, "uniform_noise": noise},
    )


def score_model(model, id_images, ood, score="entropy", batch_size=32):
    """ScoreSet with ids ``id/<i>`` and ``<source>/<i>``; also returns the ID probabilities."""
    fn = entropy_score if score == "entropy" else (lambda p: -msp_score(p))
    id_probs = model.predict_proba(id_images, batch_size)
    ids = [f"id/{i}" for i in range(len(id_images))]
    origins = ["id"] * len(id_images)
    values = [fn(id_probs)]
    for source, images in ood.items():
        ids += [f"{source}/{i}" for i in range(len(images))]
        origins += ["ood"] * len(images)
        values.append(fn(model.predict_proba(images, batch_size)))
    return ScoreSet(ids, origins, np.concatenate(values)), id_probs


def report_rows(scores, id_probs, labels, dataset="synth"):
    """One report row per OOD source plus an ``all`` row, ECE from the ID predictions."""
    conf = id_probs.max(axis=1)
    correct = id_probs.argmax(axis=1) == labels
    rows = []
    for source in scores.ood_sources():
        rows.append((f"{dataset}:{source}", metrics.summarize(scores.id_scores(), scores.ood_scores(source), conf, correct)))
    rows.append((f"{dataset}:all", metrics.summarize(scores.id_scores(), scores.ood_scores(), conf, correct)))
    return rows


@dataclass
class ModeResult:
    checkpoint: bytes
    scores_csv: str
    accuracy: float
    report: metrics.MetricReport  # the "all" row
    rows: list  # (dataset, MetricReport)


@dataclass
class SeedResult:
    seed: int
    table_csv: str
    plain: ModeResult
    soft: ModeResult

    def reports_csv(self):
        return data_io.format_reports(
            [(d, mode, r) for mode, res in (("plain", self.plain), ("soft", self.soft)) for d, r in res.rows]
        )


def _evaluate(model, config, data):
    scores, probs = score_model(model, data.test.images, data.ood)
    rows = report_rows(scores, probs, data.test.labels)
    acc = float(np.mean(probs.argmax(axis=1) == data.test.labels))
    return ModeResult(checkpoint_bytes(model, config.to_text()), data_io.format_scores(scores), acc, rows[-1][1], rows)


def run_seed(seed, setup=DeskSetup(), workers=1):
    data = desk_data(seed, setup)
    plain_cfg = setup.config("plain", seed)
    plain = train(data.train, plain_cfg)
    table = compute_accuracy_table(plain, data.train, seed=seed, workers=workers, batch_size=setup.batch_size)
    soft_cfg = setup.config("soft", seed)
    soft = train(data.train, soft_cfg, table=table)
    return SeedResult(
        seed,
        data_io.format_accuracy_table(table),
        _evaluate(plain, plain_cfg, data),
        _evaluate(soft, soft_cfg, data),
    )
