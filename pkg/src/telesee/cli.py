"""Command-line entry point: ``telesee <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 validation error.
Every command that writes outputs also writes ``<output>.manifest.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from . import __version__
from .baseline import LMJson
from .bench import bench_throughput
from .corpus import (
    DatasetValidationError,
    DocumentRecord,
    load_dataset,
    save_dataset,
    split,
    stats,
    synth_generate,
)
from .metric import MatchMode, evaluate_corpus
from .model import CheckpointError, ConfigError, init_params, load_checkpoint, save_checkpoint
from .pipeline import TeleSEE, model_config_for, train, train_examples, vocab_for
from .report import build_tables, to_csv
from .schema import (
    SchemaDef,
    SchemaError,
    compile_schema,
    default_schema,
    load_compiled,
    stage2_efficiency,
    token_savings,
)
from .textproc import SubwordSplitter, Vocabulary, model_tokens

log = logging.getLogger("telesee")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION = 0, 1, 2, 3
REFERENCE_SENTENCES, REFERENCE_WORDS = 2390, 23747
MODE_NAMES = {"exact": "exact", "approx": "approx", "multiprop": "multiprop"}


class UsageError(Exception):
    pass


# -- helpers --------------------------------------------------------------------

def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require_file(path: str | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: file not found: {path}")
    return p


def _write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def write_manifest(output: str | Path, command: str, inputs: dict[str, str | Path | None], config: dict) -> None:
    manifest = {
        "tool": "telesee",
        "version": __version__,
        "command": command,
        "inputs": {k: {"path": str(v), "sha256": _sha256(v)} for k, v in inputs.items() if v is not None},
        "config": config,
    }
    _write_json(f"{output}.manifest.json", manifest)


def _schema(path: str | None, flag: str = "--schema"):
    if path is None:
        return default_schema()
    return load_compiled(_require_file(path, flag))


def _seed(value: int | None, config: dict) -> int:
    if value is not None:
        return value
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get("TELESEE_SEED")
    if env is not None:
        return int(env)
    raise UsageError("--seed is required (or set it in --config or TELESEE_SEED)")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(_require_file(path, "--config"), encoding="utf-8") as f:
        return json.load(f)


def _pick(flag_value, config: dict, section: str, key: str, default):
    if flag_value is not None:
        return flag_value
    return config.get(section, {}).get(key, config.get(key, default))


def _load_system(path: str, schema):
    model, header = load_checkpoint(_require_file(path, "--model"), schema_version=schema.version)
    vocab = Vocabulary.from_dict(header["vocabulary"])
    if vocab.digest() != header["vocab_sha256"]:
        raise CheckpointError(f"{path}: embedded vocabulary does not match its hash")
    if header.get("system", "telesee") == "lm-json":
        return LMJson(model, schema, vocab), header
    return TeleSEE(model, schema, vocab), header


# -- commands ---------------------------------------------------------------------

def cmd_schema_compile(args) -> int:
    definition = SchemaDef.load(_require_file(args.inp, "--in"))
    compiled = compile_schema(definition)
    compiled.save(args.out)
    write_manifest(args.out, "schema compile", {"in": args.inp}, {})
    return EXIT_OK


def cmd_schema_savings(args) -> int:
    schema = _schema(args.inp, "--in")
    tokenizers = {"word": model_tokens, "subword": SubwordSplitter().split}
    report = token_savings(schema, tokenizers[args.tokenizer]).to_dict()
    if args.data:
        records = load_dataset(_require_file(args.data, "--data"), schema)
        ents = [e for r in records for e in r.entities]
        report["stage2"] = {name: stage2_efficiency(ents, tok) for name, tok in tokenizers.items()}
    _write_json(args.out, report)
    write_manifest(args.out, "schema savings", {"in": args.inp, "data": args.data}, {"tokenizer": args.tokenizer})
    print(f"mean spelled-out/special token ratio per element: {report['mean_ratio']:.3f}")
    for name, st in report.get("stage2", {}).items():
        print(f"stage-2 tokens per entity ({name}): spelled-out {st['mean_spelled']:.2f}, "
              f"special {st['mean_special']:.2f}, ratio {st['ratio']:.3f}")
    return EXIT_OK


def cmd_dataset_validate(args) -> int:
    schema = _schema(args.schema)
    records = load_dataset(_require_file(args.inp, "--in"), schema, require_entities=not args.no_entities)
    print(f"{args.inp}: {len(records)} records, 0 validation errors")
    return EXIT_OK


def cmd_dataset_stats(args) -> int:
    schema = _schema(args.schema) if args.schema else None
    records = load_dataset(_require_file(args.inp, "--in"), schema, require_entities=False)
    st = stats(records).to_dict()
    st["reference"] = {
        "sentences": REFERENCE_SENTENCES,
        "words": REFERENCE_WORDS,
        "caveat": "reference totals were counted with unpublished rules; "
                  "sentences here end at . ? ! before whitespace, words are alphanumeric runs",
    }
    _write_json(args.out, st)
    write_manifest(args.out, "dataset stats", {"in": args.inp, "schema": args.schema}, {})
    print(f"documents={st['documents']} sentences={st['sentences']} (reference {REFERENCE_SENTENCES}) "
          f"words={st['words']} (reference {REFERENCE_WORDS}); counting rules differ, see caveat")
    return EXIT_OK


def cmd_dataset_synth(args) -> int:
    schema = _schema(args.schema)
    seed = _seed(args.seed, {})
    save_dataset(synth_generate(schema, args.n, seed), args.out)
    write_manifest(args.out, "dataset synth", {"schema": args.schema}, {"n": args.n, "seed": seed})
    return EXIT_OK


def cmd_dataset_split(args) -> int:
    schema = _schema(args.schema) if args.schema else None
    records = load_dataset(_require_file(args.inp, "--in"), schema, require_entities=False)
    try:
        ratios = [float(x) for x in args.ratios.split(",")]
    except ValueError:
        raise UsageError(f"--ratios: expected comma-separated numbers, got {args.ratios!r}") from None
    if len(ratios) != 3:
        raise UsageError("--ratios needs three values (train,dev,test)")
    seed = _seed(args.seed, {})
    try:
        parts = split(records, ratios, seed)
    except ValueError as exc:
        raise UsageError(f"--ratios: {exc}") from None
    for name, part in zip(("train", "dev", "test"), parts):
        out = f"{args.out_prefix}.{name}.jsonl"
        save_dataset(part, out)
        write_manifest(out, "dataset split", {"in": args.inp}, {"ratios": ratios, "seed": seed})
    print(" ".join(f"{n}={len(p)}" for n, p in zip(("train", "dev", "test"), parts)))
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args.config)
    data = _require_file(_pick(args.data, config, "paths", "data", None), "--data")
    schema_path = _pick(args.schema, config, "paths", "schema", None)
    schema = _schema(schema_path)
    records = load_dataset(data, schema)
    seed = _seed(args.seed, config)
    model_cfg = {
        "d_model": _pick(args.d_model, config, "model", "d_model", 64),
        "n_heads": _pick(args.n_heads, config, "model", "n_heads", 4),
        "n_layers": _pick(args.n_layers, config, "model", "n_layers", 2),
        "ffn_dim": _pick(args.ffn_dim, config, "model", "ffn_dim", 128),
        "max_src_len": _pick(None, config, "model", "max_src_len", 256),
        "max_tgt_len": _pick(None, config, "model", "max_tgt_len", 64 if args.system == "telesee" else 320),
        "dropout_rate": _pick(None, config, "model", "dropout_rate", 0.0),
        "seed": seed,
    }
    hyper = {
        "epochs": _pick(args.epochs, config, "training", "epochs", 50),
        "lr": _pick(args.lr, config, "training", "lr", 1e-4),
        "weight_decay": _pick(args.weight_decay, config, "training", "weight_decay", 0.01),
        "warmup_steps": _pick(args.warmup, config, "training", "warmup", 100),
        "batch_size": _pick(args.batch_size, config, "training", "batch_size", 16),
    }
    vocab = vocab_for(records, schema)
    try:
        model = init_params(model_config_for(vocab, **model_cfg))
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    epochs = hyper.pop("epochs")
    if args.system == "telesee":
        history = train(TeleSEE(model, schema, vocab), records, epochs, seed=seed, **hyper)
    else:
        lm = LMJson(model, schema, vocab)
        history = train_examples(model, [lm.training_example(r) for r in records], epochs, seed=seed, **hyper)
    out = _pick(args.out, config, "paths", "checkpoint", None)
    if out is None:
        raise UsageError("--out is required")
    save_checkpoint(out, model, vocab.digest(), schema.version,
                    {"system": args.system, "vocabulary": vocab.to_dict(), "history": history.to_dict()})
    effective = {"system": args.system, "model": model_cfg, "training": {**hyper, "epochs": epochs}, "seed": seed}
    write_manifest(out, "train", {"data": data, "schema": schema_path, "config": args.config}, effective)
    last = history.epochs[-1]
    print(f"trained {args.system}: {epochs} epochs, final loss {last['total_loss']:.4f}")
    return EXIT_OK


def _map_jobs(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def cmd_extract(args) -> int:
    schema = _schema(args.schema)
    system, _ = _load_system(args.model, schema)
    records = load_dataset(_require_file(args.inp, "--in"), schema, require_entities=False)
    batching = "sequential" if args.sequential else "parallel"

    def run(rec: DocumentRecord) -> DocumentRecord:
        if isinstance(system, TeleSEE):
            ents, _ = system.extract(rec.text, batching, rec.doc_id)
        else:
            ents = system.extract(rec.text).entities
        return DocumentRecord(rec.doc_id, rec.text, tuple(ents), schema.version)

    preds = _map_jobs(run, records, args.jobs)
    save_dataset(preds, args.out)
    write_manifest(args.out, "extract", {"model": args.model, "schema": args.schema, "in": args.inp},
                   {"batching": batching, "jobs": args.jobs})
    return EXIT_OK


def cmd_eval(args) -> int:
    schema = load_compiled(_require_file(args.schema, "--schema")) if args.schema else None
    preds = load_dataset(_require_file(args.pred, "--pred"), schema, require_entities=True)
    refs = load_dataset(_require_file(args.ref, "--ref"), schema, require_entities=True)
    try:
        mode = MatchMode(args.mode, args.name_weight)
    except ValueError as exc:
        raise UsageError(f"--name-weight: {exc}") from None
    report = evaluate_corpus(preds, refs, mode, args.pooling, jobs=args.jobs)
    out = report.to_dict()
    out["system"] = args.system_name or Path(args.pred).stem
    _write_json(args.out, out)
    inputs = {"pred": args.pred, "ref": args.ref, "schema": args.schema}
    config = {"mode": args.mode, "name_weight": args.name_weight, "pooling": args.pooling, "jobs": args.jobs}
    write_manifest(args.out, "eval", inputs, config)
    if args.per_attribute:
        rows = [{"key": k, "score": v} for k, v in report.per_attribute.items()]
        Path(args.per_attribute).write_text(to_csv(rows), encoding="utf-8")
        write_manifest(args.per_attribute, "eval", inputs, config)
    print(f"{mode.label} delta = {report.mean_delta:.4f} over {len(report.documents)} documents")
    return EXIT_OK


def cmd_bench(args) -> int:
    schema = _schema(args.schema)
    system, header = _load_system(args.model, schema)
    if header.get("system", "telesee") != args.system:
        raise UsageError(f"--system {args.system} does not match checkpoint system {header.get('system')}")
    records = load_dataset(_require_file(args.inp, "--in"), schema, require_entities=False)
    if args.float32:
        system.model.float()
    result = bench_throughput(system, records, args.reps, "sequential" if args.sequential else "parallel",
                              jobs=args.jobs)
    result["label"] = args.label or args.system
    result["schema_version"] = schema.version
    if all(r.entities is not None for r in records):
        preds = system.predict(records)
        result["multiprop"] = evaluate_corpus(preds, records, MatchMode()).mean_delta
    _write_json(args.out, result)
    write_manifest(args.out, "bench", {"model": args.model, "in": args.inp, "schema": args.schema},
                   {"system": args.system, "reps": args.reps, "float32": args.float32, "jobs": args.jobs})
    print(f"{result['label']}: {result['samples_per_sec']:.2f} samples/sec (median of {args.reps})")
    return EXIT_OK


def cmd_report(args) -> int:
    evals = [json.loads(Path(_require_file(p, "--eval")).read_text(encoding="utf-8")) for p in args.eval]
    benches = [json.loads(Path(_require_file(p, "--bench")).read_text(encoding="utf-8")) for p in args.bench]
    if not evals and not benches:
        raise UsageError("report needs --eval and/or --bench inputs")
    tables = build_tables(evals, benches)
    panel = args.panel or ("efficiency" if benches else "scores")
    Path(args.out).write_text(to_csv(tables[panel]), encoding="utf-8")
    _write_json(Path(args.out).with_suffix(".json"), tables)
    inputs = {f"eval{i}": p for i, p in enumerate(args.eval)} | {f"bench{i}": p for i, p in enumerate(args.bench)}
    write_manifest(args.out, "report", inputs, {"panel": panel})
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="telesee", description="Structured entity extraction toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sch = sub.add_parser("schema").add_subparsers(dest="schema_cmd", required=True)
    c = sch.add_parser("compile", help="compile a schema file into its special-token registry")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_schema_compile)
    c = sch.add_parser("savings", help="spelled-out vs special-token counts per schema element")
    c.add_argument("--in", dest="inp")
    c.add_argument("--data", help="dataset whose entities give the stage-2 per-entity comparison")
    c.add_argument("--tokenizer", choices=("word", "subword"), default="subword")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_schema_savings)

    ds = sub.add_parser("dataset").add_subparsers(dest="dataset_cmd", required=True)
    c = ds.add_parser("validate")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--schema")
    c.add_argument("--no-entities", action="store_true", help="accept prediction-input files")
    c.set_defaults(func=cmd_dataset_validate)
    c = ds.add_parser("stats")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--schema")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_dataset_stats)
    c = ds.add_parser("synth")
    c.add_argument("--n", type=int, required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--schema")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_dataset_synth)
    c = ds.add_parser("split")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--ratios", default="0.8,0.1,0.1")
    c.add_argument("--seed", type=int)
    c.add_argument("--schema")
    c.add_argument("--out-prefix", required=True)
    c.set_defaults(func=cmd_dataset_split)

    c = sub.add_parser("train")
    c.add_argument("--config")
    c.add_argument("--data")
    c.add_argument("--schema")
    c.add_argument("--system", choices=("telesee", "lm-json"), default="telesee")
    c.add_argument("--epochs", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--weight-decay", type=float)
    c.add_argument("--warmup", type=int)
    c.add_argument("--batch-size", type=int)
    c.add_argument("--d-model", type=int)
    c.add_argument("--n-heads", type=int)
    c.add_argument("--n-layers", type=int)
    c.add_argument("--ffn-dim", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--out")
    c.set_defaults(func=cmd_train)

    c = sub.add_parser("extract")
    c.add_argument("--model", required=True)
    c.add_argument("--schema")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--sequential", action="store_true")
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(func=cmd_extract)

    c = sub.add_parser("eval")
    c.add_argument("--pred", required=True)
    c.add_argument("--ref", required=True)
    c.add_argument("--schema")
    c.add_argument("--mode", choices=tuple(MODE_NAMES), default="multiprop")
    c.add_argument("--name-weight", type=float, default=0.5)
    c.add_argument("--pooling", choices=("document", "pairs"), default="document")
    c.add_argument("--system-name")
    c.add_argument("--out", required=True)
    c.add_argument("--per-attribute")
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(func=cmd_eval)

    c = sub.add_parser("bench")
    c.add_argument("--system", choices=("telesee", "lm-json"), required=True)
    c.add_argument("--model", required=True)
    c.add_argument("--schema")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--reps", type=int, default=5)
    c.add_argument("--sequential", action="store_true")
    c.add_argument("--float32", action="store_true")
    c.add_argument("--label")
    c.add_argument("--jobs", type=int, default=1)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_bench)

    c = sub.add_parser("report")
    c.add_argument("--eval", nargs="*", default=[])
    c.add_argument("--bench", nargs="*", default=[])
    c.add_argument("--panel", choices=("scores", "efficiency", "correlation", "correlation_points", "radar"))
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_report)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetValidationError, SchemaError, CheckpointError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
