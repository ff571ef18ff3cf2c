import struct

import numpy as np
import pytest

from oodbridge import data_io
from oodbridge.corruptions import NUM_SPECS
from oodbridge.data_io import LabeledDataset, ScoreSet
from oodbridge.errors import CompletenessError, FormatError, ShapeError, TruncatedError
from oodbridge.metrics import MetricReport
from oodbridge.softlabel import AccuracyTable


def _dataset(n=5, k=3, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.random((n, 3, 32, 32)), rng.integers(0, k, n), k, "test", "rand")


# --- datasets --------------------------------------------------------------


def test_dataset_invariants():
    with pytest.raises(ShapeError):
        LabeledDataset(np.zeros((2, 3, 32, 32)), [0], 2)
    with pytest.raises(ShapeError):
        LabeledDataset(np.zeros((2, 3, 32, 32)), [0, 2], 2)
    with pytest.raises(ShapeError):
        LabeledDataset(np.zeros((3, 32, 32)), [0, 1, 0], 2)


def test_select_classes_relabels():
    ds = LabeledDataset(np.zeros((6, 3, 32, 32)), [0, 1, 2, 3, 2, 1], 4)
    sub = ds.select_classes([1, 3])
    assert sub.class_count == 2 and list(sub.labels) == [0, 1, 0]
    assert list(ds.select_classes([2], relabel=False).labels) == [2, 2]


# --- archives --------------------------------------------------------------


def test_archive_roundtrip(tmp_path):
    ds = _dataset()
    path = tmp_path / "a.oodt"
    data_io.write_archive(ds, path)
    back = data_io.read_archive(path)
    assert back.count == 5 and back.class_count == 3
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    assert path.stat().st_size == 28 + 4 * 5 * 3072 + 4 * 5


def test_archive_header_layout():
    buf = data_io.archive_bytes(_dataset(2, 4))
    assert buf[:4] == b"OODT"
    assert struct.unpack_from("<6I", buf, 4) == (1, 2, 3, 32, 32, 4)


def test_unlabeled_archive(tmp_path):
    images = np.random.default_rng(1).random((3, 3, 8, 8)).astype(np.float32)
    data_io.write_archive(images, tmp_path / "u.oodt")
    back = data_io.read_archive(tmp_path / "u.oodt")
    assert back.labels is None and np.array_equal(back.images, images)
    with pytest.raises(FormatError):
        back.to_dataset()


def test_archive_errors():
    buf = data_io.archive_bytes(_dataset(2))
    with pytest.raises(TruncatedError):
        data_io.parse_archive(buf[:-1])
    with pytest.raises(TruncatedError):
        data_io.parse_archive(buf[:10])
    with pytest.raises(FormatError, match="magic"):
        data_io.parse_archive(b"OODX" + buf[4:])
    with pytest.raises(FormatError, match="version"):
        data_io.parse_archive(buf[:4] + struct.pack("<I", 9) + buf[8:])
    with pytest.raises(FormatError, match="trailing"):
        data_io.parse_archive(buf + b"\0")
    bad = bytearray(buf)
    bad[28:32] = struct.pack("<f", 1.5)
    with pytest.raises(FormatError, match="outside"):
        data_io.parse_archive(bytes(bad))
    bad = bytearray(buf)
    bad[-4:] = struct.pack("<i", 7)
    with pytest.raises(FormatError, match="labels"):
        data_io.parse_archive(bytes(bad))


def test_failed_write_leaves_no_file(tmp_path):
    with pytest.raises(ShapeError):
        data_io.write_archive(np.zeros((3, 32, 32)), tmp_path / "x.oodt")
    assert list(tmp_path.iterdir()) == []


# --- CIFAR-10 binary -------------------------------------------------------


def _cifar_record(label, r, g, b):
    # one label byte, then 1024 bytes per colour plane
    return bytes([label]) + bytes([r]) * 1024 + bytes([g]) * 1024 + bytes([b]) * 1024


def test_cifar_fixture_records():
    buf = _cifar_record(7, 255, 0, 51) + _cifar_record(0, 1, 2, 3)
    assert len(buf) == 2 * 3073
    images, labels = data_io.parse_cifar_batch(buf)
    assert list(labels) == [7, 0]
    assert images.shape == (2, 3, 32, 32)
    assert np.all(images[0, 0] == 1.0) and np.all(images[0, 1] == 0.0) and np.all(images[0, 2] == np.float32(0.2))
    assert np.all(images[1, 2] == np.float32(3 / 255))


def test_cifar_pixel_order():
    rec = bytearray(_cifar_record(1, 0, 0, 0))
    rec[1 + 1024 + 32 * 2 + 5] = 255  # green plane, row 2, column 5
    images, _ = data_io.parse_cifar_batch(bytes(rec))
    assert images[0, 1, 2, 5] == 1.0 and images.sum() == 1.0


def test_cifar_errors():
    with pytest.raises(FormatError, match="multiple"):
        data_io.parse_cifar_batch(_cifar_record(1, 0, 0, 0)[:-1])
    with pytest.raises(FormatError, match="label"):
        data_io.parse_cifar_batch(_cifar_record(10, 0, 0, 0))


def test_cifar_directory(tmp_path):
    for i in range(1, 6):
        (tmp_path / f"data_batch_{i}.bin").write_bytes(_cifar_record(i, i, 0, 0) * 2)
    with pytest.raises(FormatError, match="missing"):
        data_io.load_cifar10_binary(tmp_path)
    (tmp_path / "test_batch.bin").write_bytes(_cifar_record(9, 0, 0, 9))
    train, test = data_io.load_cifar10_binary(tmp_path)
    assert (len(train), len(test)) == (10, 1)
    assert list(train.labels) == [1, 1, 2, 2, 3, 3, 4, 4, 5, 5]
    assert train.class_count == 10 and test.split == "test"


# --- synthetic data --------------------------------------------------------


def test_synth_dataset():
    a = data_io.synth_dataset(3, 10, seed=4)
    assert len(a) == 30 and np.bincount(a.labels).tolist() == [10, 10, 10]
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert np.array_equal(a.images, data_io.synth_dataset(3, 10, seed=4).images)
    assert not np.array_equal(a.images, data_io.synth_dataset(3, 10, seed=5).images)
    with pytest.raises(ValueError):
        data_io.synth_dataset(1, 10)


def test_synth_classes_differ_in_colour():
    ds = data_io.synth_dataset(3, 60, seed=0)
    means = np.stack([ds.images[ds.labels == c].mean(axis=(0, 2, 3)) for c in range(3)])
    assert np.abs(means[:, None] - means[None]).sum(axis=2)[np.triu_indices(3, 1)].min() > 0.02


def test_uniform_noise_images():
    x = data_io.uniform_noise_images(4, 3)
    assert x.shape == (4, 3, 32, 32) and x.dtype == np.float32
    assert np.array_equal(x, data_io.uniform_noise_images(4, 3))


# --- accuracy tables -------------------------------------------------------


def _table():
    accs = np.random.default_rng(0).random(NUM_SPECS)
    return AccuracyTable(accs, 10, "cifar10-train", 42)


def test_table_roundtrip(tmp_path):
    t = _table()
    path = tmp_path / "t.csv"
    data_io.write_accuracy_table(t, path)
    back = data_io.read_accuracy_table(path)
    assert np.abs(back.accuracies - t.accuracies).max() <= 5e-7
    assert (back.class_count, back.dataset_id, back.seed) == (10, "cifar10-train", 42)
    text = path.read_text()
    assert text.startswith("family,severity,accuracy\ngaussian_noise,1,")
    assert len(text.splitlines()) == 77


def test_table_missing_spec_names_it():
    lines = data_io.format_accuracy_table(_table()).splitlines()
    del lines[1 + 57]
    with pytest.raises(CompletenessError, match=r"\(contrast, 3\)"):
        data_io.parse_accuracy_table("\n".join(lines))


@pytest.mark.parametrize(
    "edit, pattern",
    [
        (lambda ls: ls.__setitem__(0, "family,severity,accuracy,extra"), "unknown column"),
        (lambda ls: ls.__setitem__(3, "fog,9,0.5"), "line 4"),
        (lambda ls: ls.__setitem__(3, "fog,1,1.5"), "line 4"),
        (lambda ls: ls.__setitem__(3, "fog,1,abc"), "line 4"),
        (lambda ls: ls.insert(3, ls[2]), "duplicate"),
        (lambda ls: ls.pop(), "trailer"),
    ],
)
def test_table_errors(edit, pattern):
    lines = data_io.format_accuracy_table(_table()).splitlines()
    edit(lines)
    with pytest.raises(FormatError, match=pattern):
        data_io.parse_accuracy_table("\n".join(lines))


# --- scores and reports ----------------------------------------------------


def test_scores_roundtrip(tmp_path):
    s = ScoreSet(["id/0", "id/1", "noise/0", "held/0"], ["id", "id", "ood", "ood"], np.array([0.1, 1 / 3, 2.5e-9, 7.0]))
    path = tmp_path / "s.csv"
    data_io.write_scores(s, path)
    back = data_io.read_scores(path)
    assert back.sample_ids == s.sample_ids and back.origins == s.origins
    assert np.array_equal(back.scores, s.scores)
    assert back.ood_sources() == ["noise", "held"]
    assert list(back.ood_scores("held")) == [7.0]
    assert all("e" not in line.rsplit(",", 1)[1] for line in path.read_text().splitlines()[1:])


def test_scores_bad_origin_names_line():
    text = "sample_id,origin,score\nid/0,id,0.5\nx/1,odd,0.2\n"
    with pytest.raises(FormatError, match="s.csv:3") as info:
        data_io.parse_scores(text, "s.csv")
    assert info.value.line == 3


@pytest.mark.parametrize(
    "text",
    [
        "sample_id,score\na,1\n",
        "sample_id,origin,score,extra\na,id,1,2\n",
        "sample_id,origin,score\na,id\n",
        "sample_id,origin,score\na,id,inf\n",
        "sample_id,origin,score\n,id,1\n",
        "",
    ],
)
def test_scores_malformed(text):
    with pytest.raises(FormatError):
        data_io.parse_scores(text)


def test_source_of():
    assert data_io.source_of("noise/12") == "noise"
    assert data_io.source_of("a/b/3") == "a/b"
    assert data_io.source_of("17") == "ood"


def test_reports_roundtrip(tmp_path):
    rows = [("synth", "entropy", MetricReport(0.12345, 0.5, 1.0, float("nan")))]
    path = tmp_path / "r.csv"
    data_io.write_reports(rows, path)
    assert path.read_text() == "dataset,method,tnr_at_tpr95,auroc,aupr,ece\nsynth,entropy,0.1235,0.5000,1.0000,nan\n"
    (name, method, rep), = data_io.read_reports(path)
    assert (name, method, rep.tnr_at_tpr95, rep.auroc) == ("synth", "entropy", 0.1235, 0.5)
    assert np.isnan(rep.ece)


def test_format_decimal_roundtrips():
    for v in (0.1, 1 / 3, 1e-12, 123456.789, 0.0):
        assert float(data_io.format_decimal(v)) == v


def test_accuracy_table_keeps_active_mask():
    table = AccuracyTable(np.round(np.linspace(0.2, 1.0, 75), 6), 4, "d", 3).restrict(["fog", "contrast"])
    back = data_io.parse_accuracy_table(data_io.format_accuracy_table(table))
    assert back == table and back.active.sum() == 10
    full = AccuracyTable(np.ones(75), 4)
    assert "active=" not in data_io.format_accuracy_table(full)
    bad = data_io.format_accuracy_table(table).replace("active=0", "active=2")
    with pytest.raises(FormatError, match="active"):
        data_io.parse_accuracy_table(bad)
