"""Command-line front end: ``oodbridge <command> [options]``.

Data sources are given as strings:

* ``path/to/file.oodt``: a tensor archive
* ``cifar10:DIR`` or ``cifar10:DIR:test``: the CIFAR-10 binary batches (train split by default)
* ``synth:classes=4,per_class=40,seed=0,split=train,keep=0+1+2``: the synthetic generator;
  ``keep`` selects (and relabels) a subset of classes
* ``noise:count=300,seed=0``: unlabeled uniform-noise images

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
"""

import argparse
import os
import re
import sys

import numpy as np

from . import data_io, metrics
from .corruptions import DEFAULT_SEVERITY, FAMILIES, NUM_SEVERITIES, CorruptionSpec, SeverityParams
from .corruptions import corrupt_images, family_from_name
from .errors import FormatError, InvalidSpecError, NumericalError, OODBridgeError, ShapeError
from .experiment import score_model
from .nnet import load_checkpoint, save_checkpoint
from .softlabel import compute_accuracy_table
from .training import TrainConfig, format_log, train

THREADS_ENV = "OODBRIDGE_THREADS"

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# sources


class Source:
    """A loaded data source: images, optional labels and a short name used in sample ids."""

    def __init__(self, name, images, labels=None, class_count=0):
        self.name = name
        self.images = images
        self.labels = labels
        self.class_count = class_count

    def dataset(self):
        if self.labels is None:
            raise UsageError(f"source {self.name!r} has no labels")
        return data_io.LabeledDataset(self.images, self.labels, self.class_count, identifier=self.name)


def _kv(text, allowed):
    out = {}
    for item in filter(None, text.split(",")):
        key, sep, value = item.partition("=")
        if not sep or key not in allowed:
            raise UsageError(f"bad source option {item!r}; allowed: {', '.join(allowed)}")
        out[key] = value
    return out


def _int(value, what):
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"{what} must be an integer, got {value!r}") from None


def load_source(text):
    if text.startswith("synth:"):
        opts = _kv(text[6:], ("classes", "per_class", "seed", "split", "keep"))
        ds = data_io.synth_dataset(
            _int(opts.get("classes", "3"), "classes"),
            _int(opts.get("per_class", "100"), "per_class"),
            seed=_int(opts.get("seed", "0"), "seed"),
            split=opts.get("split", "train"),
        )
        if "keep" in opts:
            keep = [_int(c, "keep") for c in opts["keep"].split("+")]
            if any(not 0 <= c < ds.class_count for c in keep):
                raise UsageError(f"keep classes must lie in 0..{ds.class_count - 1}")
            ds = ds.select_classes(keep)
        return Source("synth", ds.images, ds.labels, ds.class_count)
    if text.startswith("noise:"):
        opts = _kv(text[6:], ("count", "seed"))
        images = data_io.uniform_noise_images(_int(opts.get("count", "100"), "count"), _int(opts.get("seed", "0"), "seed"))
        return Source("noise", images)
    if text.startswith("cifar10:"):
        rest = text[8:]
        split = "train"
        if rest.endswith((":train", ":test")):
            rest, split = rest.rsplit(":", 1)
        train_set, test_set = data_io.load_cifar10_binary(rest)
        ds = train_set if split == "train" else test_set
        return Source("cifar10", ds.images, ds.labels, ds.class_count)
    arc = data_io.read_archive(text)
    name = os.path.splitext(os.path.basename(text))[0]
    return Source(name, arc.images, arc.labels, arc.class_count)


def _unique_names(sources):
    seen = {}
    for src in sources:
        base = src.name
        seen[base] = seen.get(base, 0) + 1
        if seen[base] > 1:
            src.name = f"{base}-{seen[base]}"
    return sources


def _threads(args):
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, _int(env, THREADS_ENV))
    return 1


def _params(args):
    return SeverityParams.load(args.params) if args.params else DEFAULT_SEVERITY


# ---------------------------------------------------------------------------
# family / severity / subset grammars


def parse_families(text):
    if text.strip() == "all":
        return list(FAMILIES)
    return [family_from_name(f) for f in text.split(",") if f.strip()]


def parse_severities(text):
    if text.strip() == "all":
        return list(range(1, NUM_SEVERITIES + 1))
    out = []
    for part in text.split(","):
        sev = _int(part.strip(), "severity")
        if not 1 <= sev <= NUM_SEVERITIES:
            raise InvalidSpecError(f"severity must be in 1..{NUM_SEVERITIES}, got {sev}")
        out.append(sev)
    return out


_SUBSET = re.compile(r"^\{\s*\d+(\s*,\s*\d+)*\s*\}$")


def parse_subsets(text):
    """``{0,1,2};{12};all`` -> list of (label, family names)."""
    subsets = []
    for part in text.split(";"):
        part = part.strip()
        if part == "all":
            subsets.append(("all", list(FAMILIES)))
        elif _SUBSET.match(part):
            idx = [int(i) for i in part[1:-1].split(",")]
            subsets.append(("{" + ",".join(map(str, idx)) + "}", [family_from_name(str(i)) for i in idx]))
        else:
            raise UsageError(f"bad subset {part!r}; expected '{{i,j,...}}' or 'all'")
    if not subsets:
        raise UsageError("no subsets given")
    return subsets


# ---------------------------------------------------------------------------
# commands


def cmd_corrupt(args):
    src = load_source(args.input)
    params = _params(args)
    families = parse_families(args.families)
    severities = parse_severities(args.severities)
    os.makedirs(args.out, exist_ok=True)
    workers = _threads(args)
    for fam in families:
        for sev in severities:
            spec = CorruptionSpec(fam, sev)
            images = corrupt_images(src.images, spec, args.seed, params, workers)
            path = os.path.join(args.out, f"{spec}.oodt")
            if src.labels is None:
                data_io.write_archive(images, path)
            else:
                data_io.write_archive(data_io.LabeledDataset(images, src.labels, src.class_count), path)
            print(path)


def _train_config(args):
    try:
        return TrainConfig(
            mode=args.mode,
            gamma=args.gamma,
            epochs=args.epochs,
            batch_size=args.batch_size,
            lr=args.lr,
            momentum=args.momentum,
            weight_decay=args.weight_decay,
            oe_lambda=args.oe_lambda,
            augment=not args.no_augment,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _train_inputs(args, config):
    if config.mode == "soft" and not args.table:
        raise UsageError("--mode soft requires --table")
    if config.mode == "oe" and not args.outliers:
        raise UsageError("--mode oe requires --outliers")
    data = load_source(args.data).dataset()
    table = data_io.read_accuracy_table(args.table) if config.mode == "soft" else None
    outliers = load_source(args.outliers).images if config.mode == "oe" else None
    test = load_source(args.test).dataset() if args.test else None
    return data, table, outliers, test


def cmd_train(args):
    config = _train_config(args)
    data, table, outliers, test = _train_inputs(args, config)
    history = []
    model = train(data, config, table=table, outliers=outliers, test=test, params=_params(args), history=history)
    save_checkpoint(model, args.out, config.to_text())
    log_path = args.log or args.out + ".log.csv"
    data_io._atomic_write(log_path, format_log(history).encode("utf-8"))
    print(args.out)


def cmd_calibrate(args):
    model, _ = load_checkpoint(args.model)
    data = load_source(args.data).dataset()
    specs = None
    if args.families != "all":
        specs = [CorruptionSpec(f, s) for f in parse_families(args.families) for s in range(1, NUM_SEVERITIES + 1)]
    table = compute_accuracy_table(model, data, specs, seed=args.seed, params=_params(args), workers=_threads(args))
    data_io.write_accuracy_table(table, args.out)
    print(args.out)


def cmd_score(args):
    model, _ = load_checkpoint(args.model)
    id_src = load_source(args.id_data)
    ood = _unique_names([load_source(s) for s in args.ood_data])
    if any(s.name == "id" for s in ood):
        raise UsageError("an OOD source may not be named 'id'")
    scores, _ = score_model(model, id_src.images, {s.name: s.images for s in ood}, args.score)
    if args.score == "msp":
        scores.scores = -scores.scores  # store the raw maximum probability
    data_io.write_scores(scores, args.out)
    print(args.out)


def _ece_inputs(args):
    if not args.ece_from:
        return None, None
    ckpt, data_src = args.ece_from
    model, _ = load_checkpoint(ckpt)
    data = load_source(data_src).dataset()
    probs = model.predict_proba(data.images, 32)
    return probs.max(axis=1), probs.argmax(axis=1) == data.labels


def cmd_eval(args):
    scores = data_io.read_scores(args.scores)
    values = -scores.scores if args.score == "msp" else scores.scores
    scores = data_io.ScoreSet(scores.sample_ids, scores.origins, values)
    if not len(scores.id_scores()):
        raise FormatError("score file has no 'id' rows", args.scores)
    sources = scores.ood_sources()
    if not sources:
        raise FormatError("score file has no 'ood' rows", args.scores)
    conf, correct = _ece_inputs(args)
    rows = []
    for source in sources:
        rows.append((source, args.method, metrics.summarize(scores.id_scores(), scores.ood_scores(source), conf, correct)))
    if len(sources) > 1:
        rows.append(("all", args.method, metrics.summarize(scores.id_scores(), scores.ood_scores(), conf, correct)))
    data_io.write_reports(rows, args.out)
    print(args.out)


def cmd_ablate(args):
    subsets = parse_subsets(args.subsets)
    config = _train_config(args)
    if config.mode != "soft":
        raise UsageError("ablate trains soft-label models; use --mode soft")
    if not args.table:
        raise UsageError("ablate requires --table")
    if not args.test or not args.ood_data:
        raise UsageError("ablate requires --test and --ood-data")
    data, table, _, test = _train_inputs(args, config)
    ood = _unique_names([load_source(s) for s in args.ood_data])
    params = _params(args)
    rows = []
    for label, fams in subsets:
        model = train(data, config, table=table.restrict(fams), params=params)
        scores, probs = score_model(model, test.images, {s.name: s.images for s in ood})
        report = metrics.summarize(
            scores.id_scores(), scores.ood_scores(), probs.max(axis=1), probs.argmax(axis=1) == test.labels
        )
        rows.append((label, "soft", report))
        print(data_io.format_report_row(label, "soft", report), file=sys.stderr)
    data_io.write_reports(rows, args.out)
    print(args.out)


# ---------------------------------------------------------------------------
# parser


def _add_common(p, seed=True):
    if seed:
        p.add_argument("--seed", type=int, default=0, help="root seed of every random stream (default 0)")
    p.add_argument("--threads", type=int, default=None, help=f"worker processes (default ${THREADS_ENV} or 1)")


def _add_train_flags(p):
    d = TrainConfig()
    p.add_argument("--data", required=True, help="training source (see 'oodbridge --help' for the source syntax)")
    p.add_argument("--test", help="labeled test source")
    p.add_argument("--mode", choices=("plain", "soft", "oe"), default="plain", help="loss mode (default plain)")
    p.add_argument("--gamma", type=float, default=d.gamma, help=f"corruption probability in soft mode (default {d.gamma})")
    p.add_argument("--table", help="accuracy-table CSV (family,severity,accuracy), required in soft mode")
    p.add_argument("--outliers", help="outlier source for oe mode")
    p.add_argument("--epochs", type=int, default=d.epochs, help=f"default {d.epochs}")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help=f"default {d.batch_size}")
    p.add_argument("--lr", type=float, default=d.lr, help=f"initial learning rate, x0.1 at 50%% and 75%% of epochs (default {d.lr})")
    p.add_argument("--momentum", type=float, default=d.momentum, help=f"default {d.momentum}")
    p.add_argument("--weight-decay", type=float, default=d.weight_decay, help=f"default {d.weight_decay}")
    p.add_argument("--oe-lambda", type=float, default=d.oe_lambda, help=f"outlier loss weight (default {d.oe_lambda})")
    p.add_argument("--no-augment", action="store_true", help="disable pad-4 random crop and horizontal flip")
    p.add_argument("--params", help="severity parameter file (lines 'family.severity = [v, ...]')")
    _add_common(p)


def build_parser():
    parser = _Parser(
        prog="oodbridge",
        description=__doc__.split("\n\n", 1)[1],
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("corrupt", help="write one corrupted archive per (family, severity)")
    p.add_argument("--in", dest="input", required=True, help="input source")
    p.add_argument("--out", required=True, help="output directory; files are named family.severity.oodt")
    p.add_argument("--families", default="all", help="'all' or comma-separated names/indices (default all)")
    p.add_argument("--severities", default="all", help="'all' or comma-separated values in 1..5 (default all)")
    p.add_argument("--params", help="severity parameter file")
    _add_common(p)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", help="train a classifier and write an OODM checkpoint")
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log CSV (epoch,loss,train_accuracy,test_accuracy); default OUT.log.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="accuracy of a model under each corruption (75-row CSV)")
    p.add_argument("--model", required=True, help="OODM checkpoint")
    p.add_argument("--data", required=True, help="labeled source, normally the training set")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--families", default="all", help="restrict to these families; the rest are written as 1.0 and flagged inactive in the trailer")
    p.add_argument("--params", help="severity parameter file")
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("score", help="per-sample detection scores (CSV sample_id,origin,score)")
    p.add_argument("--model", required=True, help="OODM checkpoint")
    p.add_argument("--id-data", required=True, help="in-distribution source")
    p.add_argument("--ood-data", nargs="+", required=True, help="one or more OOD sources")
    p.add_argument("--score", choices=("entropy", "msp"), default="entropy", help="entropy (higher = OOD) or raw MSP")
    p.add_argument("--out", required=True, help="output CSV")
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="metric report (dataset,method,tnr_at_tpr95,auroc,aupr,ece)")
    p.add_argument("--scores", required=True, help="score CSV from 'score'")
    p.add_argument("--score", choices=("entropy", "msp"), default="entropy", help="kind of score in the file")
    p.add_argument("--ece-from", nargs=2, metavar=("CHECKPOINT", "DATA"), help="compute ECE of CHECKPOINT on labeled DATA")
    p.add_argument("--method", default="entropy", help="method column (default entropy)")
    p.add_argument("--out", required=True, help="output CSV; one row per OOD source plus 'all' when there are several")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="soft-label training restricted to corruption-family subsets")
    _add_train_flags(p)
    p.set_defaults(mode="soft")
    p.add_argument("--subsets", required=True, help="';'-separated subsets: '{i,j,...}' of family indices or 'all'")
    p.add_argument("--ood-data", nargs="+", help="OOD sources for evaluation")
    p.add_argument("--out", required=True, help="output CSV, one row per subset")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        args.func(args)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, ShapeError, InvalidSpecError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OODBridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
