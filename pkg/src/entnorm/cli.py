"""Command-line entry point.

Settings come from an optional flat ``key = value`` file (``--config``);
command-line flags override it.  The seed falls back to ``NSEEN_SEED``.

Exit codes: 0 ok, 1 runtime failure, 2 input or usage error,
3 incompatible artifacts (fingerprint mismatch, corrupt or foreign file).
"""
from __future__ import annotations

import argparse
import hashlib
import io
import logging
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_ARTIFACT = 3

SEED_ENV = "NSEEN_SEED"

log = logging.getLogger("entnorm")


class UsageError(Exception):
    pass


def _int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise UsageError(f"expected positive integers, got {text!r}")
    return values


@dataclass(frozen=True)
class Option:
    type: Callable[[str], Any]
    help: str
    default: Any = None


# every key accepted in a config file; flags use the same names with dashes
OPTIONS: Dict[str, Option] = {
    "reference": Option(Path, "reference TSV (entity_id<TAB>name)"),
    "queries": Option(Path, "query TSV (mention<TAB>gold_id)"),
    "families": Option(Path, "family TSV (family_id<TAB>entity_id)"),
    "domain_pairs": Option(Path, "extra labeled pairs (a<TAB>b<TAB>y<TAB>source)"),
    "model": Option(Path, "model checkpoint path"),
    "index": Option(Path, "index file path"),
    "output_dir": Option(Path, "directory for reports"),
    "metrics_log": Option(Path, "training metrics log path"),
    "output": Option(Path, "output file (default: standard output)"),
    "seed": Option(int, "global seed (fallback: $NSEEN_SEED, then 0)"),
    "threads": Option(int, "cap on worker threads"),
    # training
    "margin": Option(float, "contrastive margin", 1.0),
    "learning_rate": Option(float, "Adam learning rate", 1e-3),
    "batch_size": Option(int, "pairs per mini-batch", 64),
    "epochs_per_round": Option(int, "epochs between mining rounds", 5),
    "rounds": Option(int, "hard-negative rounds", 3),
    "hard_neg_k": Option(int, "neighbors mined per reference name", 10),
    "negative_ratio": Option(float, "random negatives per positive", 1.0),
    "positive_cap": Option(int, "max positive pairs per entity", 100),
    "family_pairs": Option(int, "max cross-entity name pairs per family", 20),
    # encoder
    "char_embed_dim": Option(int, "character embedding size", 32),
    "hidden_dim": Option(int, "LSTM hidden size per direction", 64),
    "num_recurrent_layers": Option(int, "stacked bidirectional layers", 4),
    "output_dim": Option(int, "embedding size", 128),
    "max_sequence_length": Option(int, "names are truncated to this many characters", 128),
    "pooling": Option(str, "last | mean", "last"),
    # index and retrieval
    "n_trees": Option(int, "trees in the forest", 50),
    "max_leaf_size": Option(int, "max rows per leaf", 16),
    "split": Option(str, "two_means | random_pair", "two_means"),
    "search_budget": Option(int, "distinct candidates examined per query"),
    "overfetch": Option(int, "raw neighbors fetched per requested entity", 5),
    "k": Option(int, "entities to return", 10),
    "ks": Option(_int_list, "comma-separated cutoffs", [1, 3, 5, 10]),
}

COMMAND_OPTIONS: Dict[str, Sequence[str]] = {
    "ingest-check": ("reference", "queries", "families"),
    "train": (
        "reference", "families", "domain_pairs", "model", "metrics_log", "margin", "learning_rate", "batch_size",
        "epochs_per_round", "rounds", "hard_neg_k", "negative_ratio", "positive_cap", "family_pairs",
        "char_embed_dim", "hidden_dim", "num_recurrent_layers", "output_dim", "max_sequence_length", "pooling",
        "n_trees", "max_leaf_size", "split",
    ),
    "build-index": ("reference", "model", "index", "n_trees", "max_leaf_size", "split"),
    "query": ("model", "index", "k", "search_budget", "overfetch"),
    "evaluate": ("model", "index", "queries", "reference", "output_dir", "ks", "search_budget", "overfetch"),
    "dump-embeddings": ("model", "index", "output"),
}

REQUIRED: Dict[str, Sequence[str]] = {
    "ingest-check": ("reference",),
    "train": ("reference", "model"),
    "build-index": ("reference", "model", "index"),
    "query": ("model", "index"),
    "evaluate": ("model", "index", "queries"),
    "dump-embeddings": ("model", "index"),
}

INPUT_PATHS = ("reference", "queries", "families", "domain_pairs")


def read_config_file(path: Path) -> Dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    values: Dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{number}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS:
            raise UsageError(f"{path}:{number}: unknown key {key!r}")
        try:
            values[key] = OPTIONS[key].type(value)
        except (ValueError, UsageError) as exc:
            raise UsageError(f"{path}:{number}: bad value for {key}: {exc}") from None
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entnorm", description="Learned entity-name matching.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value settings file; flags override it")
    common.add_argument("--seed", type=int, default=None, help=OPTIONS["seed"].help)
    common.add_argument("--threads", type=int, default=None, help=OPTIONS["threads"].help)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, keys in COMMAND_OPTIONS.items():
        p = sub.add_parser(command, parents=[common])
        for key in keys:
            opt = OPTIONS[key]
            kind = str if opt.type is _int_list else opt.type
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None, help=opt.help)
        if command == "query":
            p.add_argument("mention", help="text to normalize")
    return parser


def resolve(args: argparse.Namespace) -> Dict[str, Any]:
    """Merge defaults, config file, and flags (in increasing priority)."""
    keys = list(COMMAND_OPTIONS[args.command]) + ["seed", "threads"]
    settings = {k: OPTIONS[k].default for k in keys}
    if args.config is not None:
        from_file = read_config_file(args.config)
        settings.update({k: v for k, v in from_file.items() if k in settings})
    for k in keys:
        value = getattr(args, k, None)
        if value is not None:
            settings[k] = _int_list(value) if OPTIONS[k].type is _int_list else value
    if settings["seed"] is None:
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                settings["seed"] = int(env)
            except ValueError:
                raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
        else:
            settings["seed"] = 0
    for k in REQUIRED[args.command]:
        if settings.get(k) is None:
            raise UsageError(f"missing required setting --{k.replace('_', '-')}")
    for k in INPUT_PATHS:
        path = settings.get(k)
        if path is not None and not Path(path).is_file():
            raise UsageError(f"input file not found: {path}")
    if settings["threads"] is not None and settings["threads"] < 1:
        raise UsageError("--threads must be positive")
    return settings


def _limit_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)
    from threadpoolctl import threadpool_limits

    threadpool_limits(n)


def _write_atomic(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_model(path: Path):
    from .encoder import load_model

    if not Path(path).is_file():
        raise UsageError(f"model file not found: {path}")
    with open(path, "rb") as fh:
        return load_model(fh)


def _load_index(path: Path):
    from .retrieval import EmbeddedReference

    if not Path(path).is_file():
        raise UsageError(f"index file not found: {path}")
    with open(path, "rb") as fh:
        return EmbeddedReference.load(fh)


def _model_and_index(s: Dict[str, Any]):
    model = _load_model(s["model"])
    embedded = _load_index(s["index"])
    embedded.check_model(model)
    return model, embedded


# --------------------------------------------------------------------------
# commands

def cmd_ingest_check(s: Dict[str, Any], args, out) -> int:
    from .pairs import parse_family_map
    from .refset import parse_query_set, parse_reference_set, reference_stats

    refset = parse_reference_set(Path(s["reference"]))
    stats = reference_stats(refset)
    out.write(f"entities\t{stats.entities}\n")
    out.write(f"name_pairs\t{stats.pairs}\n")
    for n_names, count in sorted(stats.histogram.items()):
        out.write(f"names_per_entity\t{n_names}\t{count}\n")
    if s.get("queries") is not None:
        queries = parse_query_set(Path(s["queries"]))
        unknown = sum(q.gold_id not in refset for q in queries)
        out.write(f"queries\t{len(queries)}\n")
        out.write(f"queries_unknown_gold\t{unknown}\n")
    if s.get("families") is not None:
        families = parse_family_map(Path(s["families"]), refset)
        out.write(f"families\t{len(families)}\n")
    return EXIT_OK


def cmd_train(s: Dict[str, Any], args, out) -> int:
    from .ann_index import ForestConfig
    from .encoder import EncoderConfig, model_to_bytes
    from .pairs import PairSet, generate_variation_pairs, parse_family_map
    from .refset import parse_reference_set
    from .training import TrainConfig, train_similarity

    refset = parse_reference_set(Path(s["reference"]))
    families = parse_family_map(Path(s["families"]), refset) if s.get("families") else None
    domain = generate_variation_pairs(refset, families, seed=s["seed"], family_pairs_per_family=s["family_pairs"])
    if s.get("domain_pairs"):
        domain = domain.union(PairSet.from_tsv(Path(s["domain_pairs"])))
    try:
        encoder_config = EncoderConfig(s["char_embed_dim"], s["hidden_dim"], s["num_recurrent_layers"],
                                       s["output_dim"], s["max_sequence_length"], s["pooling"])
        train_config = TrainConfig(
            margin=s["margin"], learning_rate=s["learning_rate"], batch_size=s["batch_size"],
            epochs_per_round=s["epochs_per_round"], rounds=s["rounds"], hard_neg_k=s["hard_neg_k"],
            seed=s["seed"], negative_ratio=s["negative_ratio"], positive_cap=s["positive_cap"],
            index=ForestConfig(s["n_trees"], s["max_leaf_size"], s["seed"], s["split"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    metrics_path = Path(s["metrics_log"] or str(s["model"]) + ".metrics.tsv")
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    with open(metrics_path, "w", encoding="utf-8") as log_stream:
        result = train_similarity(refset, domain, train_config, encoder_config, log_stream=log_stream)
    data = model_to_bytes(result.model)
    _write_atomic(Path(s["model"]), data)
    out.write(f"model\t{s['model']}\nfingerprint\t{hashlib.sha256(data).hexdigest()}\n")
    out.write(f"metrics_log\t{metrics_path}\n")
    return EXIT_OK


def cmd_build_index(s: Dict[str, Any], args, out) -> int:
    from .ann_index import ForestConfig
    from .refset import parse_reference_set
    from .retrieval import embed_reference

    refset = parse_reference_set(Path(s["reference"]))
    model = _load_model(s["model"])
    try:
        forest_config = ForestConfig(s["n_trees"], s["max_leaf_size"], s["seed"], s["split"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    embedded = embed_reference(model, refset, forest_config)
    _write_atomic(Path(s["index"]), embedded.to_bytes())
    log.info("indexed %d rows", len(embedded.store))
    out.write(f"index\t{s['index']}\nrows\t{len(embedded.store)}\nfingerprint\t{embedded.fingerprint}\n")
    return EXIT_OK


def cmd_query(s: Dict[str, Any], args, out) -> int:
    from .retrieval import retrieve

    mention = args.mention
    if not mention or not mention.strip():
        raise UsageError("mention must be non-empty")
    if s["k"] < 1:
        raise UsageError("--k must be positive")
    model, embedded = _model_and_index(s)
    result = retrieve(embedded, model, mention, s["k"], s["overfetch"], s["search_budget"])
    for rank, c in enumerate(result.candidates, 1):
        out.write(f"{rank}\t{c.entity_id}\t{c.name}\t{c.distance!r}\n")
    return EXIT_OK


def cmd_evaluate(s: Dict[str, Any], args, out) -> int:
    from .refset import parse_query_set, parse_reference_set
    from .retrieval import evaluate_hits_at_k

    queries = parse_query_set(Path(s["queries"]))
    refset = parse_reference_set(Path(s["reference"])) if s.get("reference") else None
    model, embedded = _model_and_index(s)
    report = evaluate_hits_at_k(embedded, model, queries, s["ks"], refset, s["overfetch"], s["search_budget"])
    out_dir = Path(s["output_dir"] or ".")
    _write_atomic(out_dir / "metrics.tsv", report.metrics_tsv().encode("utf-8"))
    _write_atomic(out_dir / "detail.tsv", report.detail_tsv().encode("utf-8"))
    for k in report.ks:
        out.write(f"hits@{k}\t{report.hits[k]:.4f}\n")
    if report.unknown_gold:
        out.write(f"unknown_gold\t{report.unknown_gold}\n")
    return EXIT_OK


def cmd_dump_embeddings(s: Dict[str, Any], args, out) -> int:
    from .retrieval import dump_embeddings

    _, embedded = _model_and_index(s)
    if s.get("output") is None:
        dump_embeddings(embedded, out)
    else:
        buf = io.StringIO()
        dump_embeddings(embedded, buf)
        _write_atomic(Path(s["output"]), buf.getvalue().encode("utf-8"))
    return EXIT_OK


COMMANDS = {
    "ingest-check": cmd_ingest_check,
    "train": cmd_train,
    "build-index": cmd_build_index,
    "query": cmd_query,
    "evaluate": cmd_evaluate,
    "dump-embeddings": cmd_dump_embeddings,
}


def main(argv: Optional[Sequence[str]] = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=stderr,
                        format="%(levelname)s %(name)s: %(message)s")

    from .ann_index import IndexFormatError
    from .encoder import ModelFormatError
    from .refset import ParseError
    from .retrieval import FingerprintMismatch

    try:
        settings = resolve(args)
        if settings["threads"] is not None:
            _limit_threads(settings["threads"])
        return COMMANDS[args.command](settings, args, stdout)
    except UsageError as exc:
        stderr.write(f"entnorm {args.command}: {exc}\n")
        return EXIT_USAGE
    except ParseError as exc:
        stderr.write(f"entnorm {args.command}: invalid input: {exc}\n")
        return EXIT_USAGE
    except (FingerprintMismatch, ModelFormatError, IndexFormatError) as exc:
        stderr.write(f"entnorm {args.command}: incompatible artifact: {exc}\n")
        return EXIT_ARTIFACT
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        log.debug("failure", exc_info=True)
        stderr.write(f"entnorm {args.command}: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
