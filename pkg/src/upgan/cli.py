"""Command-line entry point: ``upgan {prepare,train,eval,report,synth}``.

Hyperparameters come from a ``key = value`` config file, ``UPGAN_<KEY>``
environment variables and ``--set key=value`` flags (highest precedence).
Results go to stdout as TSV; diagnostics go to stderr.

Exit codes:
    0  success
    2  missing input file, malformed input or invalid config
    3  training diverged (the last good checkpoint is kept)
    4  checkpoint does not match the dataset vocabulary
    5  rank files share no query ids
"""
import argparse
import os
import sys

import numpy as np

from . import checkpoint, data, evaluation
from .config import ConfigError, load_config
from .evaluation import KnownTriples
from .kg_embed import EmbeddingModel, TrainingDiverged, pretrain
from .model import UPGAN, VocabMismatch, train_upgan

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_VOCAB = 4
EXIT_DISJOINT = 5


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _config(args):
    return load_config(args.config, args.set or ())


def _out(text):
    sys.stdout.write(text)


def _err(text):
    print(text, file=sys.stderr)


# verbs

def cmd_prepare(args):
    cfg = _config(args)
    corpus = data.RawCorpus(args.triples, args.interactions, args.alignment, cfg.excluded)
    dataset = data.prepare(data.read_corpus(corpus), cfg)
    dataset.save(args.out)
    _out(dataset.manifest())
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    dataset = data.SplitDataset.load(args.data)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    best = os.path.join(args.out, "best.upgn")
    try:
        # overflow shows up as a non-finite loss and is reported as divergence
        with np.errstate(over="ignore", invalid="ignore"):
            kg = pretrain(dataset, cfg)
            checkpoint.save(os.path.join(args.out, "kg.upgn"), kg.tensors())
            result = train_upgan(dataset, cfg, kg, out_dir=args.out)
    except TrainingDiverged as exc:
        last = getattr(exc, "last_good", None)
        if last is not None:
            last.save(best)
        _err(f"error: {exc}")
        return EXIT_DIVERGED
    result.model.save(best)
    _out(f"best_epoch\t{result.best_epoch}\nbest_val_mrr\t{result.best_val_mrr:.6f}\n")
    return EXIT_OK


def _load_scorer(path, dataset, cfg):
    tensors = checkpoint.load(path)
    v = dataset.vocab
    if "KG.kind" in tensors:
        if tensors["KG.entity"].shape[0] != v.n_nodes or tensors["KG.relation"].shape[0] != v.n_relations:
            raise VocabMismatch("checkpoint table sizes do not match the dataset vocabulary")
        return EmbeddingModel.from_tensors(tensors, v.n_entities), None
    model = UPGAN.from_tensors(tensors, dataset, cfg)
    return model, model


def cmd_eval(args):
    cfg = _config(args)
    dataset = data.SplitDataset.load(args.data)
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(args.checkpoint)
    scorer, upgan = _load_scorer(args.checkpoint, dataset, cfg)
    ks = cfg.hit_ks
    name = args.name or os.path.splitext(os.path.basename(args.checkpoint))[0]
    header = evaluation.format_metrics_header(ks) + "\n"
    if len(dataset.test) == 0:
        _out(header)
        return EXIT_OK
    known = KnownTriples(dataset.vocab, dataset.train, dataset.valid, dataset.test)
    report = evaluation.evaluate(scorer.score_all, dataset.test, dataset.vocab, known,
                                 graph=dataset.graph, train_triples=dataset.train, ks=ks,
                                 pessimistic=cfg.eval_ties == "pessimistic")
    table = header + evaluation.format_metrics_row(name, report) + "\n"
    _out(table)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.tsv"), "w", encoding="utf-8") as fh:
            fh.write(table)
        k = 3 if 3 in ks else ks[0]
        for kind, fname in (("sparsity", "sparsity.tsv"), ("hops", "hops.tsv")):
            with open(os.path.join(args.out, fname), "w", encoding="utf-8") as fh:
                fh.write(evaluation.format_breakdown(name, report, kind, k))
        evaluation.write_ranks(os.path.join(args.out, "ranks.tsv"),
                               evaluation.query_ids(len(dataset.test)), report.ranks)
    if args.dump_attention:
        if upgan is None:
            raise CliError(EXIT_INPUT, "attention dump needs an adversarial-model checkpoint")
        upgan.dump_attention(dataset.test[:, 0], args.dump_attention)
    return EXIT_OK


def improvement(base, value, lower_is_better=False):
    """Relative improvement of ``value`` over ``base`` in percent."""
    if base == 0:
        return float("nan")
    delta = (base - value) if lower_is_better else (value - base)
    return 100.0 * delta / base


def _default_names(paths):
    names = [os.path.splitext(os.path.basename(p))[0] for p in paths]
    if len(set(names)) < len(names):
        # rank files are usually all called ranks.tsv; fall back to their directories
        names = [os.path.basename(os.path.dirname(os.path.abspath(p))) or n for p, n in zip(paths, names)]
    return names


def cmd_report(args):
    cfg = _config(args)
    ks = cfg.hit_ks
    if len(args.ranks) < 2:
        raise CliError(EXIT_INPUT, "report needs at least two rank files")
    names = args.names.split(",") if args.names else _default_names(args.ranks)
    if len(names) != len(args.ranks):
        raise CliError(EXIT_INPUT, "--names must list one name per rank file")
    loaded = [evaluation.read_ranks(p) for p in args.ranks]
    ref_ids = set(loaded[0][0])
    for ids, _ in loaded[1:]:
        if not ref_ids & set(ids):
            raise CliError(EXIT_DISJOINT, "rank files share no query ids")
        if set(ids) != ref_ids:
            raise CliError(EXIT_DISJOINT, "rank files cover different query ids")
    reports = []
    for ids, ranks in loaded:
        order = np.argsort(np.asarray(ids, dtype=object), kind="stable")
        reports.append(evaluation.aggregate(ranks[order], ks))

    lines = [evaluation.format_metrics_header(ks)]
    lines += [evaluation.format_metrics_row(n, r) for n, r in zip(names, reports)]
    metrics = ["MR", "MRR"] + [f"H@{k}" for k in ks]
    # MR is reported raw, the rest as percentages, matching the table above
    values = [{m: (r.metrics()[m] if m == "MR" else 100 * r.metrics()[m]) for m in metrics} for r in reports]

    def improv(i, j, m):
        return improvement(round(values[j][m], 1), round(values[i][m], 1), m == "MR")

    lines.append("")
    if len(reports) == 2:
        lines.append("\t".join(["delta"] + metrics))
        lines.append("\t".join([f"{names[1]}-{names[0]}"] +
                               [f"{values[1][m] - values[0][m]:+.1f}" for m in metrics]))
        lines.append("\t".join(["%Improv."] + metrics))
        lines.append("\t".join([f"{names[1]}/{names[0]}"] + [f"{improv(1, 0, m):+.1f}" for m in metrics]))
    else:
        for m in metrics:
            lines.append("\t".join([f"%Improv.{m}"] + names))
            for i, n in enumerate(names):
                cells = [f"{improv(i, j, m):+.1f}" for j in range(len(names))]
                lines.append("\t".join([n] + cells))
    _out("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_synth(args):
    spec = data.SynthSpec(
        n_items=args.n_items, n_clusters=args.n_clusters, n_users=args.n_users,
        interactions_per_user=args.interactions_per_user, strength=args.strength,
    )
    try:
        corpus, _ = data.synth_generate(args.out, spec, args.seed)
    except data.SynthConfigError as exc:
        raise ConfigError(str(exc)) from None
    _out(f"triples\t{corpus.triples_path}\ninteractions\t{corpus.interactions_path}\n"
         f"alignment\t{corpus.alignment_path}\n")
    return EXIT_OK


# parser

def build_parser():
    p = argparse.ArgumentParser(prog="upgan", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("prepare", help="filter and split a raw corpus")
    sp.add_argument("--triples", required=True)
    sp.add_argument("--interactions", required=True)
    sp.add_argument("--alignment", required=True)
    sp.add_argument("--out", required=True, help="dataset directory to write")
    with_config(sp)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="pretrain, then adversarial training")
    sp.add_argument("--data", required=True, help="prepared dataset directory")
    sp.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="filtered ranking evaluation on the test split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", help="directory for metrics, breakdowns and per-query ranks")
    sp.add_argument("--name", help="model name in the output table")
    sp.add_argument("--dump-attention", metavar="PATH", help="write head/user attention weights")
    with_config(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="compare per-query rank files")
    sp.add_argument("ranks", nargs="+", help="rank files; the first is the baseline")
    sp.add_argument("--names", help="comma-separated model names")
    with_config(sp)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--strength", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-items", type=int, default=100)
    sp.add_argument("--n-clusters", type=int, default=4)
    sp.add_argument("--n-users", type=int, default=100)
    sp.add_argument("--interactions-per-user", type=int, default=15)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        _err(f"error: {exc}")
        return exc.code
    except FileNotFoundError as exc:
        _err(f"error: missing file: {exc.filename or exc}")
        return EXIT_INPUT
    except (ConfigError, data.ParseError, evaluation.DataError) as exc:
        _err(f"error: {exc}")
        return EXIT_INPUT
    except VocabMismatch as exc:
        _err(f"error: {exc}")
        return EXIT_VOCAB


if __name__ == "__main__":
    sys.exit(main())
