"""Command-line entry points: gendata, train, audit, eval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import corpus, groups, model, synthbench, train as training
from .data import DataError, FeatureStore, read_dataset, write_dataset
from .episodes import EpisodeError

METHODS = ("episodic", "episodic-random", "erm-linear", "erm-cosine")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    pass


@dataclass
class MetricsReport:
    average: float
    worst_group: float
    gap: float
    per_group: dict[tuple[int, int], float]
    skipped_groups: list[tuple[int, int]]
    pseudo_unbiased: float | None = None

    def to_json(self) -> str:
        payload = {
            "average": self.average,
            "worst_group": self.worst_group,
            "gap": self.gap,
            "per_group": {f"{y},{a}": acc for (y, a), acc in sorted(self.per_group.items())},
            "skipped_groups": [list(g) for g in self.skipped_groups],
            "pseudo_unbiased": self.pseudo_unbiased,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        obj = json.loads(text)
        per_group = {tuple(int(v) for v in key.split(",")): acc
                     for key, acc in obj["per_group"].items()}
        return cls(average=obj["average"], worst_group=obj["worst_group"],
                   gap=obj["gap"], per_group=per_group,
                   skipped_groups=[tuple(g) for g in obj["skipped_groups"]],
                   pseudo_unbiased=obj.get("pseudo_unbiased"))


def evaluate_predictions(preds: np.ndarray, store: FeatureStore) -> MetricsReport:
    """Group accuracies from ground-truth (class, attribute) labels."""
    if store.groups is None:
        raise DataError("test store has no ground-truth group labels")
    if len(store) == 0:
        raise DataError("empty test split")
    correct = preds == store.labels
    per_group: dict[tuple[int, int], float] = {}
    skipped: list[tuple[int, int]] = []
    attrs = sorted(set(int(a) for a in store.groups))
    for y in range(store.n_classes):
        for a in attrs:
            mask = (store.labels == y) & (store.groups == a)
            if mask.any():
                per_group[(y, a)] = float(correct[mask].mean())
            else:
                skipped.append((y, a))
    average = float(correct.mean())
    worst = min(per_group.values())
    return MetricsReport(average=average, worst_group=worst,
                         gap=average - worst, per_group=per_group,
                         skipped_groups=skipped)


def evaluate(params: model.ExtractorParams, train_store: FeatureStore,
             test_store: FeatureStore, tau: float) -> MetricsReport:
    """Centroid-classifier evaluation on a split with ground-truth groups."""
    cset = model.full_data_centroids(params, train_store, tau)
    preds = model.predict_classes(cset, params, test_store.features)
    return evaluate_predictions(preds, test_store)


def build_attribute_index(store: FeatureStore, captions: corpus.CaptionSet,
                          lexicon: corpus.PosLexicon,
                          vocab: corpus.AttributeVocabulary):
    incidence = corpus.build_incidence(captions, vocab, lexicon,
                                       expected_ids=store.ids)
    return groups.GroupIndex(store.label_map(), incidence,
                             classes=list(range(store.n_classes)))


def _data_paths(data_dir: Path) -> dict[str, Path]:
    return {
        "train": data_dir / "train.csv",
        "val": data_dir / "val.csv",
        "test": data_dir / "test.csv",
        "captions_train": data_dir / "captions_train.jsonl",
        "captions_val": data_dir / "captions_val.jsonl",
        "lexicon": data_dir / "lexicon.tsv",
    }


def cmd_gendata(args) -> int:
    spec = synthbench.load_bench_spec(args.spec) if args.spec else synthbench.BenchSpec()
    if args.seed is not None:
        spec = synthbench.BenchSpec(**{**spec.__dict__, "seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = synthbench.generate_dataset(spec)
    lexicon = synthbench.build_lexicon(spec)
    cap_root = np.random.SeedSequence(spec.seed + 1)
    cap_ss = cap_root.spawn(3)
    for i, split in enumerate(("train", "val", "test")):
        store = dataset.split(split)
        write_dataset(out / f"{split}.csv", store)
        caps = synthbench.synthesize_captions(store, spec,
                                              np.random.default_rng(cap_ss[i]))
        synthbench.write_captions(out / f"captions_{split}.jsonl", caps)
    synthbench.write_lexicon(out / "lexicon.tsv", lexicon)
    print(f"wrote synthetic benchmark to {out}")
    return EXIT_OK


def run_training(cfg: training.TrainConfig, method: str, min_frequency: int,
                 data_dir: Path, out: Path):
    """Shared by cmd_train and the sweep harness; writes all artifacts."""
    paths = _data_paths(data_dir)
    train_store = read_dataset(paths["train"])
    val_store = read_dataset(paths["val"])
    lexicon = corpus.load_lexicon(paths["lexicon"])
    caps_train = corpus.load_captions(paths["captions_train"])
    caps_val = corpus.load_captions(paths["captions_val"])
    vocab = corpus.build_vocabulary(caps_train, lexicon, min_frequency)
    train_index = build_attribute_index(train_store, caps_train, lexicon, vocab)
    val_index = build_attribute_index(val_store, caps_val, lexicon, vocab)
    out.mkdir(parents=True, exist_ok=True)

    if method in ("episodic", "episodic-random"):
        if method == "episodic-random":
            cfg = training.TrainConfig(**{**cfg.__dict__, "episode_mode": "random"})
        history = training.meta_train(cfg, train_store, train_index,
                                      val_store, val_index)
        history.write_csv(out / "history.csv")
        for rec in history.records:
            model.save_checkpoint(out / f"ckpt_epoch_{rec.epoch}.json",
                                  rec.params, cfg.tau, rec.epoch)
        best = history.best_epoch()
        (out / "best_checkpoint.txt").write_text(f"ckpt_epoch_{best}.json\n")
        groups.write_spuriousness_csv(out / "spuriousness_initial.csv",
                                      history.records[0].table, train_index,
                                      attribute_names=vocab.attributes)
        groups.write_spuriousness_csv(out / "spuriousness_final.csv",
                                      history.records[-1].table, train_index,
                                      attribute_names=vocab.attributes)
        return history
    # ERM baselines
    mode = "linear" if method == "erm-linear" else "cosine"
    result = training.erm_train(cfg, train_store, val_store, mode=mode)
    with open(out / "history.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss,selection_metric,lr\n")
        for epoch, loss, acc, lr in result.history:
            fh.write(f"{epoch},{loss!r},{acc!r},{lr!r}\n")
    model.save_checkpoint(out / f"ckpt_epoch_{result.best_epoch}.json",
                          result.best_params, cfg.tau, result.best_epoch)
    head_payload = {
        "mode": mode,
        "weight": [[float(v) for v in row] for row in result.best_head.weight],
        "bias": [float(v) for v in result.best_head.bias],
    }
    (out / "head.json").write_text(json.dumps(head_payload, sort_keys=True))
    (out / "best_checkpoint.txt").write_text(f"ckpt_epoch_{result.best_epoch}.json\n")
    return result


def load_head(path):
    obj = json.loads(Path(path).read_text())
    head = model.LinearHead(weight=np.array(obj["weight"], dtype=float),
                            bias=np.array(obj["bias"], dtype=float))
    return head, obj["mode"]


def cmd_train(args) -> int:
    cfg, extras = training.load_train_config(
        args.config, extra_keys={"method": str, "min_frequency": int})
    if args.seed is not None:
        cfg = training.TrainConfig(**{**cfg.__dict__, "seed": args.seed})
    if "method" not in extras:
        raise UsageError(f"{args.config}: missing required config key 'method'")
    method = extras["method"]
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; expected one of {METHODS}")
    run_training(cfg, method, extras.get("min_frequency", 10),
                 Path(args.data), Path(args.out))
    print(f"training artifacts written to {args.out}")
    return EXIT_OK


def cmd_audit(args) -> int:
    params, tau, _ = model.load_checkpoint(args.checkpoint)
    data_dir = Path(args.data)
    paths = _data_paths(data_dir)
    store = read_dataset(paths["train"])
    lexicon = corpus.load_lexicon(paths["lexicon"])
    caps = corpus.load_captions(paths["captions_train"])
    vocab = corpus.build_vocabulary(caps, lexicon, args.min_frequency)
    index = build_attribute_index(store, caps, lexicon, vocab)
    record = training.train_prediction_record(params, store, tau)
    table = groups.build_spuriousness_table(index, record, args.metric)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    groups.write_spuriousness_csv(out, table, index,
                                  attribute_names=vocab.attributes,
                                  sort_by_score=True)
    if args.plot:
        _plot_scores(out.with_suffix(".png"), table)
    print(f"spuriousness audit written to {out}")
    return EXIT_OK


def _plot_scores(path, table: groups.SpuriousnessTable):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    scores = np.sort(table.scores.ravel())[::-1]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(scores, marker=".", linestyle="-")
    ax.set_xlabel("class-attribute correlation (sorted)")
    ax.set_ylabel(f"score ({table.metric_kind})")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_eval(args) -> int:
    params, tau, _ = model.load_checkpoint(args.checkpoint)
    train_store = read_dataset(Path(args.data) / "train.csv")
    test_store = read_dataset(Path(args.data) / "test.csv")
    if args.head:
        head, mode = load_head(args.head)
        preds = training.erm_predict(params, head, test_store.features, mode, tau)
        report = evaluate_predictions(preds, test_store)
    else:
        report = evaluate(params, train_store, test_store, tau)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    print(f"average={report.average:.4f} worst_group={report.worst_group:.4f} "
          f"gap={report.gap:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spurmeta")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gendata", help="generate a synthetic benchmark")
    p.add_argument("--spec", help="benchmark spec file (key=value)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gendata)

    p = sub.add_parser("train", help="train a model per a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="directory from gendata")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("audit", help="emit a sorted spuriousness table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metric", default="tanh-abs-log-ratio", choices=groups.METRICS)
    p.add_argument("--min-frequency", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--head", help="ERM head file; otherwise centroid inference")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, training.TrainError) as exc:
        # TrainError from config parsing is a usage problem; from the loop,
        # divergence.  Distinguish on the message.
        if "non-finite" in str(exc):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (corpus.CorpusError, DataError, groups.GroupError,
            synthbench.BenchError, EpisodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except model.ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
