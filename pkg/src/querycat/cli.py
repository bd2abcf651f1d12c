"""Command-line entry point wiring the whole pipeline.

Subcommands: synth, ingest, prepare, train, eval, predict, serve,
gradcheck. Every option can also come from a TOML config file with one
table per subcommand; precedence is flags > file > defaults. Exit codes:
0 success, 1 usage error, 2 data/model error.
"""

from __future__ import annotations

import argparse
import sys
from typing import Callable, Sequence

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib  # type: ignore[no-redef]

import numpy as np

from .errors import (
    BindFailure,
    ConfigMismatch,
    EmptyQuery,
    FormatVersionMismatch,
    IndexOutOfRange,
    InvalidArgument,
    InvalidSpec,
    IoFailure,
    MalformedRecord,
    QuerycatError,
    ShapeMismatch,
    StateMissing,
    VocabHashMismatch,
)
from .fsio import atomic_write_text, read_text
from .ingest import (
    NoisePolicy,
    SynthSpec,
    events_to_jsonl,
    filter_noise,
    generate_synthetic_log,
    label_all,
    parse_click_log,
    read_records_tsv,
    write_records_tsv,
)
from .models import (
    CnnConfig,
    MlpConfig,
    TrainConfig,
    build_cnn,
    build_mlp,
    evaluate,
    predict,
    train,
)
from .nncore import OptimizerConfig, grad_check, load_model, save_model
from .serve import PredictionService, ServiceConfig
from .textprep import Vocabulary, build_vocab, encode_dataset, load_dataset, persist_dataset, split

USAGE_ERRORS = (InvalidArgument, InvalidSpec)
DATA_ERRORS = (
    IoFailure,
    MalformedRecord,
    FormatVersionMismatch,
    VocabHashMismatch,
    ConfigMismatch,
    EmptyQuery,
    IndexOutOfRange,
    ShapeMismatch,
    StateMissing,
    BindFailure,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage problems must exit 1, not argparse's default 2
    def error(self, message: str) -> None:  # type: ignore[override]
        raise _UsageError(message)


def _csv_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


# ---------------------------------------------------------------------------
# option schema: key -> (kind, default); kinds drive TOML value validation

_SCHEMAS: dict[str, dict[str, tuple[str, object]]] = {
    "synth": {
        "out": ("opt_str", None),
        "classes": ("int", 8),
        "queries_per_class": ("int", 100),
        "clicks_per_query": ("int", 10),
        "noise": ("float", 0.0),
        "vocab_pool": ("int", 1000),
        "order_sensitive": ("bool", False),
        "seed": ("int", 0),
    },
    "ingest": {
        "log": ("opt_str", None),
        "out": ("opt_str", None),
        "min_clicks": ("int", 3),
        "dedupe_window": ("int", 60),
        "keep_bots": ("bool", False),
        "live_categories": ("opt_ints", None),
        "start_ts": ("opt_int", None),
        "end_ts": ("opt_int", None),
        "strict": ("bool", False),
    },
    "prepare": {
        "records": ("opt_str", None),
        "vocab_out": ("opt_str", None),
        "dataset_out": ("opt_str", None),
        "eval_out": ("opt_str", None),
        "vocab_size": ("int", 12814),
        "seq_len": ("int", 10),
        "split_ratio": ("float", 0.5),
        "seed": ("int", 0),
    },
    "train": {
        "dataset_in": ("opt_str", None),
        "eval_in": ("opt_str", None),
        "vocab_in": ("opt_str", None),
        "model_out": ("opt_str", None),
        "metrics_out": ("opt_str", None),
        "model_kind": ("str", "cnn"),
        "embedding_dim": ("int", 128),
        "filter_widths": ("ints", (1, 2, 3)),
        "num_filters": ("int", 128),
        "keep_prob": ("float", 0.5),
        "activation": ("str", "relu"),
        "hidden_sizes": ("ints", (200, 200)),
        "batch_size": ("int", 64),
        "epochs": ("int", 100),
        "seq_len": ("opt_int", None),
        "optimizer": ("str", "adam"),
        "lr": ("float", 1e-3),
        "seed": ("int", 0),
        "static_embedding": ("bool", False),
        "deterministic": ("bool", False),
        "quiet": ("bool", False),
    },
    "eval": {
        "model_in": ("opt_str", None),
        "dataset_in": ("opt_str", None),
        "batch_size": ("int", 512),
    },
    "predict": {
        "model_in": ("opt_str", None),
        "vocab_in": ("opt_str", None),
        "query": ("opt_str", None),
        "top_k": ("int", 3),
    },
    "serve": {
        "model_in": ("opt_str", None),
        "vocab_in": ("opt_str", None),
        "host": ("str", "127.0.0.1"),
        "port": ("int", 8080),
        "max_query_bytes": ("int", 2048),
    },
    "gradcheck": {
        "seed": ("int", 0),
    },
}


def _check_kind(key: str, kind: str, value: object) -> object:
    if value is None and kind.startswith("opt_"):
        return None
    base = kind.removeprefix("opt_")
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise _UsageError(f"option {key!r} must be an integer")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise _UsageError(f"option {key!r} must be a number")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise _UsageError(f"option {key!r} must be a string")
        return value
    if base == "bool":
        if not isinstance(value, bool):
            raise _UsageError(f"option {key!r} must be a boolean")
        return value
    if base == "ints":
        if isinstance(value, (list, tuple)) and all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            return tuple(value)
        raise _UsageError(f"option {key!r} must be a list of integers")
    raise AssertionError(f"unknown kind {kind}")


def _resolve(args: argparse.Namespace, command: str) -> dict:
    """Merge defaults, config-file section, and explicit flags."""
    schema = _SCHEMAS[command]
    resolved = {key: default for key, (_, default) in schema.items()}
    if args.config is not None:
        try:
            raw = read_text(args.config)
        except IoFailure as exc:
            raise _UsageError(str(exc)) from exc
        try:
            doc = tomllib.loads(raw)
        except tomllib.TOMLDecodeError as exc:
            raise _UsageError(f"bad config file: {exc}") from exc
        section = doc.get(command, {})
        if not isinstance(section, dict):
            raise _UsageError(f"config section [{command}] must be a table")
        unknown = sorted(set(section) - set(schema))
        if unknown:
            raise _UsageError(f"unknown config keys in [{command}]: {', '.join(unknown)}")
        for key, value in section.items():
            resolved[key] = _check_kind(key, schema[key][0], value)
    for key in schema:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = _check_kind(key, schema[key][0], value)
    return resolved


def _require(resolved: dict, command: str, *keys: str) -> None:
    missing = [k for k in keys if resolved[k] is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise _UsageError(f"{command} requires {flags}")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(resolved: dict) -> int:
    _require(resolved, "synth", "out")
    spec = SynthSpec(
        n_classes=resolved["classes"],
        queries_per_class=resolved["queries_per_class"],
        clicks_per_query=resolved["clicks_per_query"],
        noise_fraction=resolved["noise"],
        vocab_pool_size=resolved["vocab_pool"],
        order_sensitive=resolved["order_sensitive"],
    )
    events = generate_synthetic_log(spec, seed=resolved["seed"])
    atomic_write_text(resolved["out"], events_to_jsonl(events))
    print(f"wrote {len(events)} events to {resolved['out']}", file=sys.stderr)
    return 0


def _cmd_ingest(resolved: dict) -> int:
    _require(resolved, "ingest", "log", "out")
    lines = read_text(resolved["log"]).splitlines()
    parsed = parse_click_log(lines, strict=resolved["strict"])
    events = parsed.events
    if resolved["start_ts"] is not None:
        events = [e for e in events if e.timestamp >= resolved["start_ts"]]
    if resolved["end_ts"] is not None:
        events = [e for e in events if e.timestamp <= resolved["end_ts"]]
    live = resolved["live_categories"]
    policy = NoisePolicy(
        drop_bots=not resolved["keep_bots"],
        dedupe_window_seconds=resolved["dedupe_window"],
        live_categories=frozenset(live) if live is not None else None,
        min_clicks_per_query=resolved["min_clicks"],
    )
    kept = filter_noise(events, policy)
    records = label_all(kept)
    write_records_tsv(records, resolved["out"])
    print(
        f"parsed={len(parsed.events)} malformed={len(parsed.malformed_lines)} "
        f"kept={len(kept)} queries={len(records)}",
        file=sys.stderr,
    )
    return 0


def _cmd_prepare(resolved: dict) -> int:
    _require(resolved, "prepare", "records", "vocab_out", "dataset_out", "eval_out")
    pairs = read_records_tsv(read_text(resolved["records"]))
    if not pairs:
        raise InvalidArgument("no labeled queries to prepare")
    vocab = build_vocab((q for q, _ in pairs), max_size=resolved["vocab_size"])
    dataset = encode_dataset(pairs, vocab, seq_len=resolved["seq_len"])
    train_set, eval_set = split(dataset, ratio=resolved["split_ratio"], seed=resolved["seed"])
    vocab.save(resolved["vocab_out"])
    persist_dataset(train_set, resolved["dataset_out"])
    persist_dataset(eval_set, resolved["eval_out"])
    print(
        f"vocab_rows={vocab.num_rows} train={len(train_set)} eval={len(eval_set)}",
        file=sys.stderr,
    )
    return 0


def _cmd_train(resolved: dict) -> int:
    _require(resolved, "train", "dataset_in", "vocab_in", "model_out")
    vocab = Vocabulary.load(resolved["vocab_in"])
    train_set = load_dataset(resolved["dataset_in"])
    eval_set = load_dataset(resolved["eval_in"]) if resolved["eval_in"] else None
    if resolved["seq_len"] is not None and resolved["seq_len"] != train_set.seq_len:
        raise ConfigMismatch(
            f"--seq-len {resolved['seq_len']} but the dataset was encoded at {train_set.seq_len}"
        )
    common = dict(
        vocab_rows=vocab.num_rows,
        class_ids=tuple(train_set.class_ids),
        embedding_dim=resolved["embedding_dim"],
        activation=resolved["activation"],
        seq_len=train_set.seq_len,
        seed=resolved["seed"],
        embedding_trainable=not resolved["static_embedding"],
        vocab_hash=vocab.content_hash(),
    )
    if resolved["model_kind"] == "cnn":
        model = build_cnn(CnnConfig(
            filter_widths=resolved["filter_widths"],
            filters_per_width=resolved["num_filters"],
            keep_prob=resolved["keep_prob"],
            **common,
        ))
    elif resolved["model_kind"] == "mlp":
        model = build_mlp(MlpConfig(hidden_sizes=resolved["hidden_sizes"], **common))
    else:
        raise _UsageError(f"unknown model kind {resolved['model_kind']!r}")
    config = TrainConfig(
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        optimizer=OptimizerConfig(algorithm=resolved["optimizer"], lr=resolved["lr"]),
        seed=resolved["seed"],
        verbose=not resolved["quiet"],
    )
    curve = train(model, train_set, eval_set, config)
    save_model(model, resolved["model_out"])
    if resolved["metrics_out"]:
        curve.to_csv(resolved["metrics_out"])
    print(f"saved model to {resolved['model_out']}", file=sys.stderr)
    return 0


def _cmd_eval(resolved: dict) -> int:
    _require(resolved, "eval", "model_in", "dataset_in")
    model = load_model(resolved["model_in"])
    dataset = load_dataset(resolved["dataset_in"])
    result = evaluate(model, dataset, batch_size=resolved["batch_size"])
    print(f"accuracy {result.accuracy:.6f}")
    print(f"mean_loss {result.mean_loss:.6f}")
    print("classes " + ",".join(str(c) for c in model.class_ids))
    print("confusion")
    for row in result.confusion:
        print("\t".join(str(int(v)) for v in row))
    return 0


def _cmd_predict(resolved: dict) -> int:
    _require(resolved, "predict", "model_in", "vocab_in", "query")
    model = load_model(resolved["model_in"])
    vocab = Vocabulary.load(resolved["vocab_in"])
    ranked = predict(model, vocab, resolved["query"], top_k=resolved["top_k"])
    for cat, prob in ranked:
        print(f"{cat}\t{prob:.6f}")
    return 0


def _cmd_serve(resolved: dict) -> int:
    _require(resolved, "serve", "model_in", "vocab_in")
    vocab = Vocabulary.load(resolved["vocab_in"])
    config = ServiceConfig(
        host=resolved["host"],
        port=resolved["port"],
        max_query_bytes=resolved["max_query_bytes"],
    )
    service = PredictionService(config, resolved["model_in"], vocab)
    service.start()
    print(
        f"serving on {config.host}:{service.port} "
        f"model_version={service.snapshot.version}",
        file=sys.stderr,
    )
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        service.stop()
    return 0


def _cmd_gradcheck(resolved: dict) -> int:
    seed = resolved["seed"]
    model = build_cnn(CnnConfig(
        vocab_rows=20,
        class_ids=(1, 10, 27),
        embedding_dim=4,
        filter_widths=(1, 2),
        filters_per_width=2,
        keep_prob=1.0,
        activation="tanh",
        seq_len=5,
        seed=seed,
    ))
    rng = np.random.default_rng([seed, 7])
    ids = rng.integers(0, 20, size=(4, 5))
    labels = rng.integers(0, 3, size=4)
    err = grad_check(model, ids, labels, epsilon=1e-4)
    print(f"max relative error {err:.6e}")
    return 0 if err < 1e-4 else 2


_DISPATCH: dict[str, Callable[[dict], int]] = {
    "synth": _cmd_synth,
    "ingest": _cmd_ingest,
    "prepare": _cmd_prepare,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "serve": _cmd_serve,
    "gradcheck": _cmd_gradcheck,
}


def build_parser() -> _Parser:
    parser = _Parser(prog="querycat", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML config file with a [%s] table" % name)
        return p

    p = add("synth", "generate a synthetic click log")
    p.add_argument("--out", help="output JSONL path")
    p.add_argument("--classes", type=int)
    p.add_argument("--queries-per-class", type=int, dest="queries_per_class")
    p.add_argument("--clicks-per-query", type=int, dest="clicks_per_query")
    p.add_argument("--noise", type=float, help="fraction of clicks sent to a wrong category")
    p.add_argument("--vocab-pool", type=int, dest="vocab_pool")
    p.add_argument("--order-sensitive", action="store_const", const=True, dest="order_sensitive")
    p.add_argument("--seed", type=int)

    p = add("ingest", "click log JSONL -> labeled query TSV")
    p.add_argument("--log", help="input JSONL path")
    p.add_argument("--out", help="output TSV path")
    p.add_argument("--min-clicks", type=int, dest="min_clicks")
    p.add_argument("--dedupe-window", type=int, dest="dedupe_window", help="seconds")
    p.add_argument("--keep-bots", action="store_const", const=True, dest="keep_bots")
    p.add_argument("--live-categories", type=_csv_ints, dest="live_categories")
    p.add_argument("--start-ts", type=int, dest="start_ts", help="keep events at or after this timestamp")
    p.add_argument("--end-ts", type=int, dest="end_ts", help="keep events at or before this timestamp")
    p.add_argument("--strict", action="store_const", const=True,
                   help="fail on the first malformed line instead of skipping")

    p = add("prepare", "labeled TSV -> vocabulary + encoded train/eval datasets")
    p.add_argument("--records", help="labeled TSV from ingest")
    p.add_argument("--vocab-out", dest="vocab_out")
    p.add_argument("--dataset-out", dest="dataset_out", help="training split path")
    p.add_argument("--eval-out", dest="eval_out", help="evaluation split path")
    p.add_argument("--vocab-size", type=int, dest="vocab_size",
                   help="total vocabulary rows including pad and unk")
    p.add_argument("--seq-len", type=int, dest="seq_len")
    p.add_argument("--split-ratio", type=float, dest="split_ratio")
    p.add_argument("--seed", type=int)

    p = add("train", "train a model on an encoded dataset")
    p.add_argument("--dataset-in", dest="dataset_in")
    p.add_argument("--eval-in", dest="eval_in")
    p.add_argument("--vocab-in", dest="vocab_in")
    p.add_argument("--model-out", dest="model_out")
    p.add_argument("--metrics-out", dest="metrics_out", help="per-step metrics CSV")
    p.add_argument("--model-kind", dest="model_kind", choices=("cnn", "mlp"))
    p.add_argument("--embedding-dim", type=int, dest="embedding_dim")
    p.add_argument("--filter-widths", type=_csv_ints, dest="filter_widths")
    p.add_argument("--num-filters", type=int, dest="num_filters")
    p.add_argument("--keep-prob", type=float, dest="keep_prob")
    p.add_argument("--activation", choices=("relu", "tanh"))
    p.add_argument("--hidden-sizes", type=_csv_ints, dest="hidden_sizes",
                   help="baseline hidden layer sizes")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seq-len", type=int, dest="seq_len",
                   help="cross-checked against the dataset header")
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--static-embedding", action="store_const", const=True, dest="static_embedding",
                   help="freeze the embedding table")
    p.add_argument("--deterministic", action="store_const", const=True,
                   help="accepted for interface parity; runs are single-threaded "
                        "and bit-reproducible either way")
    p.add_argument("--quiet", action="store_const", const=True)

    p = add("eval", "accuracy and confusion matrix on stdout")
    p.add_argument("--model-in", dest="model_in")
    p.add_argument("--dataset-in", dest="dataset_in")
    p.add_argument("--batch-size", type=int, dest="batch_size")

    p = add("predict", "one-shot dominant-category prediction")
    p.add_argument("--model-in", dest="model_in")
    p.add_argument("--vocab-in", dest="vocab_in")
    p.add_argument("--query")
    p.add_argument("--top-k", type=int, dest="top_k")

    p = add("serve", "run the prediction HTTP service")
    p.add_argument("--model-in", dest="model_in")
    p.add_argument("--vocab-in", dest="vocab_in")
    p.add_argument("--host")
    p.add_argument("--port", type=int, help="0 picks a free port")
    p.add_argument("--max-query-bytes", type=int, dest="max_query_bytes")

    p = add("gradcheck", "finite-difference check on a tiny model")
    p.add_argument("--seed", type=int)

    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError("a subcommand is required (see --help)")
        resolved = _resolve(args, args.command)
        return _DISPATCH[args.command](resolved)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except USAGE_ERRORS as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except QuerycatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
