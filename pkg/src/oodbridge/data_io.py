"""Datasets and every on-disk format used by the package.

Formats (all integers little-endian):

``OODT`` tensor archive
    magic ``b"OODT"``, then uint32 version, count, C, H, W, K (0 when the
    archive carries no labels), then ``count*C*H*W`` float32 pixels in
    channel-major row-major order, then ``count`` int32 labels if K > 0.

CIFAR-10 binary batches (read only)
    records of 1 label byte followed by 3072 pixel bytes (R, G, B planes).

Accuracy table CSV
    header ``family,severity,accuracy``, 75 rows with 6-decimal accuracies
    and a trailing ``# K=<k> dataset=<id> seed=<seed>`` comment line.

Score CSV
    header ``sample_id,origin,score`` with origin ``id`` or ``ood``.

Metric report CSV
    header ``dataset,method,tnr_at_tpr95,auroc,aupr,ece``, 4-decimal values.
"""

import csv
import io
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import CompletenessError, FormatError, ShapeError, TruncatedError
from .rng import make_rng

ARCHIVE_MAGIC = b"OODT"
ARCHIVE_VERSION = 1
_ARCHIVE_HEADER = struct.Struct("<4s6I")

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]


@dataclass
class LabeledDataset:
    """Images (N, 3, H, W) float32 in [0, 1] with integer labels below ``class_count``."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"
    identifier: str = "dataset"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if self.labels.shape != (len(self.images),):
            raise ShapeError("need exactly one label per image")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ShapeError(f"labels must lie in 0..{self.class_count - 1}")

    def __len__(self):
        return len(self.labels)

    def subset(self, index, split=None, identifier=None):
        return LabeledDataset(
            self.images[index],
            self.labels[index],
            self.class_count,
            split or self.split,
            identifier or self.identifier,
        )

    def select_classes(self, classes, relabel=True, identifier=None):
        """Keep samples of the given classes; relabel them 0..len(classes)-1."""
        classes = list(classes)
        keep = np.isin(self.labels, classes)
        labels = self.labels[keep]
        k = self.class_count
        if relabel:
            lookup = {c: i for i, c in enumerate(classes)}
            labels = np.array([lookup[c] for c in labels], dtype=np.int64)
            k = len(classes)
        return LabeledDataset(self.images[keep], labels, k, self.split, identifier or self.identifier)


@dataclass
class TensorArchive:
    images: np.ndarray
    labels: np.ndarray = None
    class_count: int = 0
    version: int = ARCHIVE_VERSION

    @property
    def count(self):
        return len(self.images)

    def to_dataset(self, split="test", identifier="archive"):
        if self.labels is None:
            raise FormatError("archive has no labels")
        return LabeledDataset(self.images, self.labels, self.class_count, split, identifier)


# ---------------------------------------------------------------------------
# atomic writes


def _atomic_write(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# OODT archives


def archive_bytes(data):
    if isinstance(data, LabeledDataset):
        images, labels, k = data.images, data.labels, data.class_count
    else:
        images, labels, k = np.asarray(data, dtype=np.float32), None, 0
    if images.ndim != 4:
        raise ShapeError(f"images must be (N, C, H, W), got shape {images.shape}")
    n, c, h, w = images.shape
    header = _ARCHIVE_HEADER.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, n, c, h, w, k)
    parts = [header, np.ascontiguousarray(images, dtype="<f4").tobytes()]
    if k:
        parts.append(np.ascontiguousarray(labels, dtype="<i4").tobytes())
    return b"".join(parts)


def write_archive(data, path):
    """Write a LabeledDataset (with labels) or a bare image array (without)."""
    _atomic_write(path, archive_bytes(data))


def parse_archive(buf, path=None):
    if len(buf) < _ARCHIVE_HEADER.size:
        raise TruncatedError("archive shorter than its header", path)
    magic, version, n, c, h, w, k = _ARCHIVE_HEADER.unpack_from(buf)
    if magic != ARCHIVE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {ARCHIVE_MAGIC!r}", path)
    if version != ARCHIVE_VERSION:
        raise FormatError(f"unsupported archive version {version}", path)
    n_pix = n * c * h * w
    expected = _ARCHIVE_HEADER.size + 4 * n_pix + (4 * n if k else 0)
    if len(buf) < expected:
        raise TruncatedError(f"payload truncated: {len(buf)} of {expected} bytes", path)
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after payload", path)
    off = _ARCHIVE_HEADER.size
    images = np.frombuffer(buf, dtype="<f4", count=n_pix, offset=off).reshape(n, c, h, w)
    if n_pix and not (np.isfinite(images).all() and images.min() >= 0.0 and images.max() <= 1.0):
        raise FormatError("pixel values outside [0, 1]", path)
    labels = None
    if k:
        labels = np.frombuffer(buf, dtype="<i4", count=n, offset=off + 4 * n_pix).astype(np.int64)
        if n and (labels.min() < 0 or labels.max() >= k):
            raise FormatError(f"labels outside 0..{k - 1}", path)
    return TensorArchive(images.astype(np.float32), labels, k, version)


def read_archive(path):
    with open(path, "rb") as fh:
        return parse_archive(fh.read(), path=path)


def load_archive_dataset(path, split="test", identifier=None):
    ident = identifier or os.path.splitext(os.path.basename(os.fspath(path)))[0]
    return read_archive(path).to_dataset(split, ident)


# ---------------------------------------------------------------------------
# CIFAR-10 binary


def parse_cifar_batch(buf, path=None):
    if len(buf) % CIFAR_RECORD:
        raise FormatError(f"size {len(buf)} is not a multiple of {CIFAR_RECORD}", path)
    records = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if len(bad):
        raise FormatError(f"record {bad[0]} has label byte {labels[bad[0]]} > 9", path)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10_binary(directory):
    """Read the binary CIFAR-10 batches from ``directory`` as (train, test)."""
    out = []
    for split, names in (("train", CIFAR_TRAIN_FILES), ("test", CIFAR_TEST_FILES)):
        images, labels = [], []
        for name in names:
            path = os.path.join(directory, name)
            if not os.path.exists(path):
                raise FormatError("missing CIFAR-10 batch file", path)
            with open(path, "rb") as fh:
                im, lb = parse_cifar_batch(fh.read(), path)
            images.append(im)
            labels.append(lb)
        out.append(LabeledDataset(np.concatenate(images), np.concatenate(labels), 10, split, f"cifar10-{split}"))
    return tuple(out)


# ---------------------------------------------------------------------------
# synthetic data


_SHAPES = ("disk", "square", "triangle", "cross", "ring", "bar", "diamond", "star")


def _shape_mask(kind, yy, xx, cy, cx, r, angle):
    ca, sa = math.cos(angle), math.sin(angle)
    u = (xx - cx) * ca + (yy - cy) * sa
    v = -(xx - cx) * sa + (yy - cy) * ca
    if kind == "disk":
        return u ** 2 + v ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if kind == "triangle":
        return (v <= 0.6 * r) & (v >= -r + 1.7 * np.abs(u))
    if kind == "cross":
        return ((np.abs(u) <= 0.3 * r) | (np.abs(v) <= 0.3 * r)) & (np.abs(u) <= r) & (np.abs(v) <= r)
    if kind == "ring":
        d = u ** 2 + v ** 2
        return (d <= r ** 2) & (d >= (0.55 * r) ** 2)
    if kind == "bar":
        return (np.abs(u) <= r) & (np.abs(v) <= 0.35 * r)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= r
    # star: disk modulated by angle
    phi = np.arctan2(v, u)
    return np.sqrt(u ** 2 + v ** 2) <= r * (0.55 + 0.45 * np.cos(5 * phi))


def _hue_to_rgb(h):
    k = (np.array([5.0, 3.0, 1.0]) + h * 6.0) % 6.0
    return 1.0 - np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def _smooth_noise(rng, side, cells):
    coarse = rng.random((cells + 1, cells + 1))
    t = np.linspace(0, cells, side)
    i = np.minimum(t.astype(int), cells - 1)
    f = t - i
    top = coarse[i][:, i] * (1 - f)[None, :] + coarse[i][:, i + 1] * f[None, :]
    bot = coarse[i + 1][:, i] * (1 - f)[None, :] + coarse[i + 1][:, i + 1] * f[None, :]
    return top * (1 - f)[:, None] + bot * f[:, None]


def synth_image(rng, label, classes, side=32):
    """One image of class ``label``: a coloured shape on a textured background.

    The background is a high-contrast smooth field plus a sinusoidal
    grating. Hue jitter, a random distractor shape and pixel noise keep
    the classes from being trivially separable.
    """
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    bg = 0.1 + 0.8 * _smooth_noise(rng, side, 4)
    theta = rng.uniform(0, math.pi)
    freq = rng.uniform(0.5, 1.2)
    phase = rng.uniform(0, 2 * math.pi)
    bg = bg + 0.12 * np.sin(freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    image = bg[None] * (0.5 + 0.5 * _hue_to_rgb(rng.random()))[:, None, None]
    if rng.random() < 0.5:
        kind = _SHAPES[rng.integers(len(_SHAPES))]
        cy, cx = rng.uniform(0.1, 0.9, size=2) * side
        mask = _shape_mask(kind, yy, xx, cy, cx, rng.uniform(0.08, 0.14) * side, rng.uniform(0, 2 * math.pi))
        color = _hue_to_rgb(rng.random()) * rng.uniform(0.6, 1.0)
        image = image * (1 - mask) + color[:, None, None] * mask
    kind = _SHAPES[label % len(_SHAPES)]
    hue = (label / classes + rng.normal(0, 0.06)) % 1.0
    color = _hue_to_rgb(hue) * rng.uniform(0.7, 1.0)
    r = rng.uniform(0.22, 0.34) * side
    cy, cx = rng.uniform(0.35, 0.65, size=2) * side
    opacity = rng.uniform(0.85, 1.0)
    mask = opacity * _shape_mask(kind, yy, xx, cy, cx, r, rng.uniform(0, 2 * math.pi))
    image = image * (1 - mask) + color[:, None, None] * mask
    image = image + 0.03 * rng.standard_normal((3, side, side))
    return np.clip(image, 0.0, 1.0)


def synth_dataset(classes, per_class, image_side=32, seed=0, split="train", identifier=None):
    """Balanced, class-separable synthetic images; sample ``i`` draws from stream (seed, i)."""
    if classes < 2:
        raise ValueError("need at least two classes")
    n = classes * per_class
    labels = np.arange(n) % classes
    images = np.empty((n, 3, image_side, image_side), dtype=np.float32)
    for i in range(n):
        images[i] = synth_image(make_rng(seed, i), int(labels[i]), classes, image_side)
    return LabeledDataset(images, labels, classes, split, identifier or f"synth{classes}-s{seed}")


def uniform_noise_images(count, seed, shape=(3, 32, 32)):
    """i.i.d. Uniform[0, 1] images, an easy far-OOD set."""
    return make_rng(seed).random((count,) + tuple(shape)).astype(np.float32)


# ---------------------------------------------------------------------------
# CSV formats


def _read_text(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return fh.read()


def _rows(text, header, path):
    """Yield (line number, row) for data rows after checking the header."""
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty file", path)
    got = [h.strip() for h in next(csv.reader([lines[0]]))]
    if got != header:
        unknown = [h for h in got if h not in header]
        missing = [h for h in header if h not in got]
        detail = []
        if unknown:
            detail.append(f"unknown column(s) {', '.join(unknown)}")
        if missing:
            detail.append(f"missing column(s) {', '.join(missing)}")
        if not detail:
            detail.append("columns out of order")
        raise FormatError(f"expected header {','.join(header)}: {'; '.join(detail)}", path, 1)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        row = next(csv.reader([line]))
        if len(row) != len(header):
            raise FormatError(f"expected {len(header)} fields, got {len(row)}", path, lineno)
        yield lineno, [c.strip() for c in row]


def _parse_float(text, what, path, lineno):
    try:
        v = float(text)
    except ValueError:
        raise FormatError(f"bad {what} {text!r}", path, lineno) from None
    if not math.isfinite(v):
        raise FormatError(f"{what} must be finite", path, lineno)
    return v


def format_decimal(value):
    """Shortest round-tripping decimal without exponent notation."""
    return np.format_float_positional(float(value), unique=True, trim="-")


def format_accuracy_table(table):
    from .corruptions import CorruptionSpec

    out = io.StringIO()
    out.write("family,severity,accuracy\n")
    for i, acc in enumerate(table.accuracies):
        spec = CorruptionSpec.from_index(i)
        out.write(f"{spec.family},{spec.severity},{acc:.6f}\n")
    trailer = f"# K={table.class_count} dataset={table.dataset_id} seed={table.seed}"
    if not table.active.all():
        # entries never calibrated stay out of sampling after a round trip
        trailer += " active=" + "".join("1" if a else "0" for a in table.active)
    out.write(trailer + "\n")
    return out.getvalue()


def parse_accuracy_table(text, path=None):
    from .corruptions import NUM_SPECS, CorruptionSpec, list_corruptions
    from .errors import InvalidSpecError
    from .softlabel import AccuracyTable

    accs = {}
    for lineno, (fam, sev, acc) in _rows(text, ["family", "severity", "accuracy"], path):
        try:
            spec = CorruptionSpec(fam, int(sev))
        except (ValueError, InvalidSpecError) as exc:
            raise FormatError(str(exc), path, lineno) from None
        value = _parse_float(acc, "accuracy", path, lineno)
        if not 0.0 <= value <= 1.0:
            raise FormatError(f"accuracy {value} outside [0, 1]", path, lineno)
        if spec.index in accs:
            raise FormatError(f"duplicate row for {spec.family},{spec.severity}", path, lineno)
        accs[spec.index] = value
    missing = [s for s in list_corruptions() if s.index not in accs]
    if missing:
        names = ", ".join(f"({s.family}, {s.severity})" for s in missing)
        raise CompletenessError(f"table is missing {len(missing)} spec(s): {names}", path)

    meta = {}
    for line in text.splitlines():
        if line.startswith("#"):
            for token in line[1:].split():
                if "=" in token:
                    key, value = token.split("=", 1)
                    meta[key] = value
    try:
        k = int(meta["K"])
        seed = int(meta.get("seed", 0))
    except (KeyError, ValueError):
        raise FormatError("missing or bad '# K=... dataset=... seed=...' trailer", path) from None
    active = None
    if "active" in meta:
        flags = meta["active"]
        if len(flags) != NUM_SPECS or set(flags) - {"0", "1"} or "1" not in flags:
            raise FormatError(f"bad active mask in trailer: {flags!r}", path)
        active = np.array([c == "1" for c in flags])
    return AccuracyTable(
        np.array([accs[i] for i in range(NUM_SPECS)]),
        class_count=k,
        dataset_id=meta.get("dataset", "unknown"),
        seed=seed,
        active=active,
    )


def write_accuracy_table(table, path):
    _atomic_write(path, format_accuracy_table(table).encode("utf-8"))


def read_accuracy_table(path):
    return parse_accuracy_table(_read_text(path), path)


@dataclass
class ScoreSet:
    """Parallel arrays of sample ids, origins ("id"/"ood") and OOD-ness scores."""

    sample_ids: list = field(default_factory=list)
    origins: list = field(default_factory=list)
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.sample_ids)

    def id_scores(self):
        return self.scores[np.array([o == "id" for o in self.origins], dtype=bool)]

    def ood_scores(self, source=None):
        mask = np.array(
            [o == "ood" and (source is None or source_of(s) == source) for s, o in zip(self.sample_ids, self.origins)],
            dtype=bool,
        )
        return self.scores[mask]

    def ood_sources(self):
        seen = []
        for s, o in zip(self.sample_ids, self.origins):
            if o == "ood" and source_of(s) not in seen:
                seen.append(source_of(s))
        return seen


def source_of(sample_id):
    """Sample ids are ``<source>/<index>``; bare ids belong to source ``ood``."""
    return sample_id.rsplit("/", 1)[0] if "/" in sample_id else "ood"


def format_scores(scores):
    out = io.StringIO()
    out.write("sample_id,origin,score\n")
    for sid, origin, value in zip(scores.sample_ids, scores.origins, scores.scores):
        out.write(f"{sid},{origin},{format_decimal(value)}\n")
    return out.getvalue()


def parse_scores(text, path=None):
    ids, origins, values = [], [], []
    for lineno, (sid, origin, score) in _rows(text, ["sample_id", "origin", "score"], path):
        if origin not in ("id", "ood"):
            raise FormatError(f"origin must be 'id' or 'ood', got {origin!r}", path, lineno)
        if not sid:
            raise FormatError("empty sample_id", path, lineno)
        ids.append(sid)
        origins.append(origin)
        values.append(_parse_float(score, "score", path, lineno))
    return ScoreSet(ids, origins, np.array(values, dtype=np.float64))


def write_scores(scores, path):
    _atomic_write(path, format_scores(scores).encode("utf-8"))


def read_scores(path):
    return parse_scores(_read_text(path), path)


REPORT_HEADER = ["dataset", "method", "tnr_at_tpr95", "auroc", "aupr", "ece"]


def _fmt4(v):
    return "nan" if v is None or not math.isfinite(v) else f"{v:.4f}"


def format_report_row(dataset, method, report):
    # names such as "{0,1}" need CSV quoting
    out = io.StringIO()
    csv.writer(out, lineterminator="").writerow([dataset, method] + [_fmt4(getattr(report, k)) for k in REPORT_HEADER[2:]])
    return out.getvalue()


def format_reports(rows):
    """``rows`` is a sequence of (dataset, method, MetricReport)."""
    lines = [",".join(REPORT_HEADER)]
    lines += [format_report_row(d, m, r) for d, m, r in rows]
    return "\n".join(lines) + "\n"


def parse_reports(text, path=None):
    from .metrics import MetricReport

    rows = []
    for lineno, row in _rows(text, REPORT_HEADER, path):
        vals = []
        for name, cell in zip(REPORT_HEADER[2:], row[2:]):
            if cell == "nan":
                vals.append(float("nan"))
            else:
                vals.append(_parse_float(cell, name, path, lineno))
        rows.append((row[0], row[1], MetricReport(*vals)))
    return rows


def write_reports(rows, path):
    _atomic_write(path, format_reports(rows).encode("utf-8"))


def read_reports(path):
    return parse_reports(_read_text(path), path)
