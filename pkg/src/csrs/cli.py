"""Command-line front end: ingest, train, eval, ablate and search.

Configuration is layered: built-in defaults, then a ``key=value`` config
file (``--config``), then ``CSRS_<KEY>`` environment variables, then
command-line flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .corpus import (
    JAVA_KEYWORDS, STOPWORDS, EncodedCorpus, LengthConfig, Vocabulary, build_vocab, encode_corpus,
    encode_query, load_word_file, read_corpus,
)
from .evaluation import ABLATION_LABELS, evaluate, format_table, run_ablation, search
from .model import VARIANTS, ModelConfig, load_checkpoint, read_manifest, variant_config
from .trainer import TrainConfig, TrainingError, train

ENV_PREFIX = "CSRS_"
EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

RECORDS_FILE = "records.jsonl"
ENCODED_FILE = "encoded.jsonl"
CODE_VOCAB_FILE = "code_vocab.txt"
DESC_VOCAB_FILE = "desc_vocab.txt"
REPORT_FILE = "ingest_report.jsonl"
MANIFEST_FILE = "manifest.txt"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # paths
    corpus: str = ""
    data_dir: str = "csrs-data"
    eval_data_dir: str = ""
    checkpoint: str = "csrs-model.ckpt"
    curve: str = ""
    report: str = ""
    # ingest
    stopwords: str = ""
    keywords: str = ""
    min_frequency: int = 1
    max_vocab: int = 0
    desc_length: int = 30
    name_length: int = 6
    api_length: int = 30
    tokens_length: int = 50
    # model
    variant: str = "full"
    relevance_pool_axis: str = "code_column"
    embed_init: float = 1.0
    # training
    dim: int = 100
    batch_size: int = 128
    dropout: float = 0.25
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: int = 256
    epochs: int = 10
    seed: int = 0
    negatives_per_positive: int = 1
    val_fraction: float = 0.05
    val_pool_size: int = 11
    # evaluation and search
    pool_size: int = 0
    workers: int = 1
    top_k: int = 10
    query: str = ""

    def lengths(self):
        return LengthConfig(description=self.desc_length, name=self.name_length,
                            api=self.api_length, tokens=self.tokens_length)

    def train_config(self):
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def model_config(self, code_vocab_size, desc_vocab_size):
        base = ModelConfig(code_vocab_size=code_vocab_size, desc_vocab_size=desc_vocab_size,
                           dim=self.dim, hidden=self.hidden, lengths=self.lengths(),
                           relevance_pool_axis=self.relevance_pool_axis, dropout=self.dropout,
                           embed_init=self.embed_init)
        return variant_config(base, self.variant)


HELP = {
    "corpus": "input corpus (line-delimited JSON) for ingest",
    "data_dir": "directory of ingested artifacts",
    "eval_data_dir": "ingested artifacts to evaluate on (default: data_dir)",
    "checkpoint": "model checkpoint path",
    "curve": "training curve output (line-delimited JSON); empty disables",
    "report": "evaluation record output; empty disables",
    "stopwords": "stopword list file, one word per line (default: shipped list)",
    "keywords": "language keyword list file (default: shipped Java reserved words)",
    "min_frequency": "drop words rarer than this from the vocabularies",
    "max_vocab": "vocabulary size cap including PAD/UNK; 0 is unlimited",
    "desc_length": "description length after pad/truncate",
    "name_length": "method-name length",
    "api_length": "API-sequence length",
    "tokens_length": "body-token length",
    "variant": "model variant: " + ", ".join(VARIANTS),
    "relevance_pool_axis": "relevance pooling axis: code_column or description_row",
    "embed_init": "standard deviation of the embedding initialisation",
    "dim": "embedding width",
    "batch_size": "mini-batch size",
    "dropout": "dropout rate on the matching features",
    "lr": "Adam learning rate",
    "beta1": "Adam beta1",
    "beta2": "Adam beta2",
    "eps": "Adam epsilon",
    "hidden": "scorer hidden width",
    "epochs": "training epochs",
    "seed": "random seed",
    "negatives_per_positive": "sampled negatives per positive pair",
    "val_fraction": "held-out fraction for validation MRR",
    "val_pool_size": "pool size for validation ranking",
    "pool_size": "evaluation pool size (truth + distractors); 0 ranks against the whole corpus",
    "workers": "scoring threads",
    "top_k": "results shown by search",
    "query": "search query; empty starts an interactive prompt",
}


def _convert(name, value):
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError as exc:
        raise UsageError(f"{name}: cannot parse {value!r} as {kind}") from exc
    return str(value)


def read_config_file(path):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve_config(file_values=None, env=None, flags=None):
    """Layer defaults < config file < environment < flags into a :class:`RunConfig`."""
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for source, layer in (("config file", file_values or {}), ("flags", flags or {})):
        unknown = sorted(set(layer) - known)
        if unknown:
            raise UsageError(f"unknown config key(s) in {source}: {', '.join(unknown)}")
    values.update(file_values or {})
    for key, value in (env or {}).items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            if name not in known:
                raise UsageError(f"unknown config key in environment: {key}")
            values[name] = value
    values.update(flags or {})
    return RunConfig(**{k: _convert(k, v) for k, v in values.items()})


def config_listing():
    lines = ["configuration keys (flag --key-name, file key=value, env CSRS_KEY):"]
    for f in fields(RunConfig):
        lines.append(f"  {f.name} = {f.default!r}")
    return "\n".join(lines)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="csrs", description="Code search by relevance and semantic matching.",
                     epilog=config_listing(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    for f in fields(RunConfig):
        common.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=argparse.SUPPRESS,
                            metavar=f.type.upper(), help=f"{HELP[f.name]} (default: {f.default!r})")
    docs = {
        "ingest": "parse a corpus, build vocabularies and encode it",
        "train": "train a model on ingested data",
        "eval": "rank each description's code and report Recall@k/MRR/NDCG",
        "ablate": "train and evaluate a model variant (--variant all runs every variant)",
        "search": "rank the ingested codes against a free-text query",
    }
    for name, doc in docs.items():
        sub.add_parser(name, parents=[common], help=doc, description=doc)
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def cmd_ingest(cfg, out):
    if not cfg.corpus:
        raise UsageError("ingest needs --corpus")
    keywords = load_word_file(cfg.keywords) if cfg.keywords else JAVA_KEYWORDS
    stopwords = load_word_file(cfg.stopwords) if cfg.stopwords else STOPWORDS
    records, report = read_corpus(cfg.corpus, keywords, stopwords)
    if not records:
        raise ValueError(f"{cfg.corpus}: no records ({report.dropped} dropped)")
    code_vocab, desc_vocab = build_vocab(records, cfg.min_frequency, cfg.max_vocab or None)
    lengths = cfg.lengths()
    encoded = encode_corpus(records, code_vocab, desc_vocab, lengths, report=report)
    data = Path(cfg.data_dir)
    data.mkdir(parents=True, exist_ok=True)
    _write_lines(data / RECORDS_FILE, (json.dumps(r.to_json(), sort_keys=True) for r in records))
    encoded.save(data / ENCODED_FILE)
    code_vocab.save(data / CODE_VOCAB_FILE)
    desc_vocab.save(data / DESC_VOCAB_FILE)
    _write_lines(data / REPORT_FILE, (json.dumps(x, sort_keys=True) for x in report.lines()))
    manifest = {"records": len(records), "code_vocab_size": len(code_vocab),
                "desc_vocab_size": len(desc_vocab), **{f"length_{k}": v for k, v in asdict(lengths).items()}}
    _write_lines(data / MANIFEST_FILE, (f"{k}={v}" for k, v in manifest.items()))
    print(f"ingested {report.kept} records ({report.dropped} dropped) into {data}", file=out)
    print(str(report), file=out)
    return EXIT_OK


def load_data(data_dir):
    data = Path(data_dir)
    for name in (ENCODED_FILE, CODE_VOCAB_FILE, DESC_VOCAB_FILE):
        if not (data / name).exists():
            raise FileNotFoundError(f"{data / name} missing; run `csrs ingest` first")
    return (EncodedCorpus.load(data / ENCODED_FILE), Vocabulary.load(data / CODE_VOCAB_FILE),
            Vocabulary.load(data / DESC_VOCAB_FILE))


def check_compatible(config, corpus, code_vocab=None, desc_vocab=None):
    """Raise ``ValueError`` naming the first field where model and data disagree."""
    widths = {"description": corpus.desc.shape[1], "name": corpus.name.shape[1],
              "api": corpus.api.shape[1], "tokens": corpus.tokens.shape[1]}
    for name, width in widths.items():
        if config.lengths.of(name) != width:
            raise ValueError(f"length mismatch for field {name!r}: model expects "
                             f"{config.lengths.of(name)}, data has {width}")
    for name, vocab in (("code_vocab_size", code_vocab), ("desc_vocab_size", desc_vocab)):
        if vocab is not None and getattr(config, name) != len(vocab):
            raise ValueError(f"{name} mismatch: model has {getattr(config, name)}, data has {len(vocab)}")


def _train_and_save(cfg, corpus, model_config, out):
    if cfg.curve:
        Path(cfg.curve).unlink(missing_ok=True)
    tc = cfg.train_config()

    def progress(epoch, loss, trainer):
        print(f"epoch {epoch}/{tc.epochs} loss {loss:.4f}", file=out)

    result = train(corpus, tc, model_config=model_config, curve_path=cfg.curve or None,
                   on_epoch=progress)
    result.model.save(cfg.checkpoint, {"variant": cfg.variant, "seed": cfg.seed, "epochs": tc.epochs,
                                       "best_epoch": result.best_epoch or tc.epochs})
    return result


def cmd_train(cfg, out):
    corpus, code_vocab, desc_vocab = load_data(cfg.data_dir)
    model_config = cfg.model_config(len(code_vocab), len(desc_vocab))
    check_compatible(model_config, corpus)
    result = _train_and_save(cfg, corpus, model_config, out)
    print(f"saved {cfg.checkpoint} ({result.model.parameter_count} parameters)", file=out)
    return EXIT_OK


def _emit_report(cfg, reports, out):
    print(format_table(reports), file=out)
    for r in reports:
        print(r.record(), file=out)
    if cfg.report:
        _write_lines(cfg.report, (r.record() for r in reports))


def cmd_eval(cfg, out):
    corpus, code_vocab, desc_vocab = load_data(cfg.eval_data_dir or cfg.data_dir)
    model = load_checkpoint(cfg.checkpoint)
    check_compatible(model.config, corpus, code_vocab, desc_vocab)
    variant = read_manifest(cfg.checkpoint).get("extra.variant", "full")
    report = evaluate(model, corpus, pool_size=cfg.pool_size or None, seed=cfg.seed,
                      workers=cfg.workers, label=ABLATION_LABELS.get(variant, variant))
    _emit_report(cfg, [report], out)
    return EXIT_OK


def cmd_ablate(cfg, out):
    corpus, code_vocab, desc_vocab = load_data(cfg.data_dir)
    eval_corpus = None
    if cfg.eval_data_dir:
        eval_corpus, ev_code, ev_desc = load_data(cfg.eval_data_dir)
        if len(ev_code) != len(code_vocab) or len(ev_desc) != len(desc_vocab):
            raise ValueError("eval_data_dir vocabularies differ from data_dir vocabularies")
    variants = list(VARIANTS) if cfg.variant == "all" else [cfg.variant]
    if any(v not in VARIANTS for v in variants):
        raise UsageError(f"unknown variant {cfg.variant!r}; choose from all, {', '.join(VARIANTS)}")
    base = RunConfig(**{**asdict(cfg), "variant": "full"}).model_config(len(code_vocab), len(desc_vocab))
    check_compatible(base, corpus)
    runs = []
    for v in variants:
        ckpt = cfg.checkpoint if len(variants) == 1 else f"{cfg.checkpoint}.{v}"
        run = run_ablation(v, corpus, base, cfg.train_config(), eval_corpus=eval_corpus,
                           pool_size=cfg.pool_size or None, eval_seed=cfg.seed, workers=cfg.workers)
        run.model.save(ckpt, {"variant": v, "seed": cfg.seed})
        print(f"{v}: scorer input {run.model.config.scorer_input}, saved {ckpt}", file=out)
        runs.append(run)
    _emit_report(cfg, [r.report for r in runs], out)
    return EXIT_OK


def _load_records(data_dir):
    path = Path(data_dir) / RECORDS_FILE
    records = {}
    if path.exists():
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                obj = json.loads(line)
                records[str(obj["id"])] = obj
    return records


def _snippet(record, width=72):
    if record is None:
        return ""
    text = " ".join(str(record.get("raw_source", "")).split())
    if not text:
        text = str(record.get("tokens", ""))
    return text if len(text) <= width else text[:width - 3] + "..."


def run_query(text, model, corpus, desc_vocab, records, top_k, workers, out):
    """Print the top ``top_k`` codes for ``text``; returns False if the query is empty."""
    ids = encode_query(text, desc_vocab, model.config.lengths)
    if not np.any(ids):
        return False
    rows, scores = search(model, corpus, ids, top_k=top_k, workers=workers)
    for rank, (row, score) in enumerate(zip(rows, scores), 1):
        rec = records.get(str(corpus.ids[row]))
        name = "".join(w if i == 0 else w.capitalize()
                       for i, w in enumerate(str(rec.get("method_name", "")).split())) if rec else ""
        print(f"{rank:>3}  {score:.4f}  {corpus.ids[row]}  {name}  {_snippet(rec)}", file=out)
    return True


def cmd_search(cfg, out, stdin=None):
    corpus, code_vocab, desc_vocab = load_data(cfg.data_dir)
    model = load_checkpoint(cfg.checkpoint)
    check_compatible(model.config, corpus, code_vocab, desc_vocab)
    records = _load_records(cfg.data_dir)
    if cfg.top_k < 1:
        raise UsageError("top_k must be at least 1")
    if cfg.query:
        if not run_query(cfg.query, model, corpus, desc_vocab, records, cfg.top_k, cfg.workers, out):
            raise ValueError("query is empty after tokenisation")
        return EXIT_OK
    stdin = stdin or sys.stdin
    interactive = stdin.isatty()
    while True:
        if interactive:
            print("query> ", end="", file=out, flush=True)
        line = stdin.readline()
        if not line:
            break
        if not line.strip():
            continue
        if not run_query(line, model, corpus, desc_vocab, records, cfg.top_k, cfg.workers, out):
            print("empty query after tokenisation; try again", file=out)
    return EXIT_OK


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "search": cmd_search}


def main(argv=None, out=None, env=None):
    out = out or sys.stdout
    env = os.environ if env is None else env
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(file_values, env, flags)
        return COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"csrs {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, TrainingError) as exc:
        print(f"csrs {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
