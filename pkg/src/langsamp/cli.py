"""``langsamp`` command line: vocab, training, ablation, evaluation and inspection.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import (
    CheckpointError, CheckpointManifest, checkpoint_name, load_checkpoint, read_header, save_checkpoint,
)
from .corpus import CorpusError, LanguageScriptRegistry, Vocab, build_vocab_from_dir, load_corpus, register_corpus
from .evaluation import (
    EvalReport,
    EvaluationError,
    donor_select,
    lang_codes_from_registry,
    load_parallel,
    pca_project,
    pca_svg,
    SimilarityMatrix,
    retrieval_table,
    similarity_from_model,
    similarity_improvement,
)
from .model import ConfigError, ModelConfig
from .numerics import NumericError
from .training import TrainConfig, TrainingError, ablation_run, train

logger = logging.getLogger("langsamp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

COMMANDS = ("build-vocab", "train", "ablate", "eval-retrieval", "eval-similarity",
            "eval-improvement", "donor", "pca", "inspect")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class VocabSettings:
    max_size: int = 30000
    min_frequency: int = 1


@dataclass
class EvalSettings:
    parallel_dir: str | None = None
    layer: int | None = None
    k: int = 10
    n_sentences: int = 100
    max_pairs: int | None = None
    source: str | None = None


@dataclass
class RunConfig:
    corpus_dir: str
    output_dir: str
    seed: int = 0
    chunk_len: int = 512
    val_fraction: float = 0.05
    vocab: VocabSettings = field(default_factory=VocabSettings)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: EvalSettings = field(default_factory=EvalSettings)
    base_dir: Path = field(default=Path("."), repr=False)

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({"seed": self.seed, **self.train})

    def model_config(self, vocab_size: int, registry: LanguageScriptRegistry, chunk_len: int) -> ModelConfig:
        d = {"seed": self.seed, "max_seq_len": chunk_len, **self.model}
        for derived in ("vocab_size", "num_languages", "num_scripts"):
            if derived in d:
                raise ConfigError(f"model.{derived} is derived from the corpus and may not be set")
        d.update(vocab_size=vocab_size, num_languages=registry.num_languages,
                 num_scripts=registry.num_scripts)
        return ModelConfig.from_dict(d)


def _strict(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)} - {"base_dir"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key {where}.{unknown[0]}" if where else f"unknown config key {unknown[0]}")
    return data


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file {str(path)!r} not found")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    _strict(RunConfig, raw, "")
    for req in ("corpus_dir", "output_dir"):
        if req not in raw:
            raise ConfigError(f"config is missing {req!r}")
    raw = dict(raw)
    raw["vocab"] = VocabSettings(**_strict(VocabSettings, raw.get("vocab", {}), "vocab"))
    raw["eval"] = EvalSettings(**_strict(EvalSettings, raw.get("eval", {}), "eval"))
    model = raw.get("model", {})
    _strict(ModelConfig, model, "model")
    train_cfg = raw.get("train", {})
    _strict(TrainConfig, train_cfg, "train")
    cfg = RunConfig(**raw, base_dir=path.resolve().parent)
    cfg.train_config()  # validate early
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_report(report: EvalReport, out_dir: Path, name: str, stamp: bool) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    if stamp:
        report.config = {**report.config, "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
    path = report.save(out_dir / name)
    print(str(path))
    return path


def _load_model(path):
    try:
        params, manifest = load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint {str(path)!r} not found") from None
    meta = manifest.meta
    if "vocab" not in meta or "registry" not in meta:
        raise DataError(f"checkpoint {str(path)!r} carries no vocab/registry metadata")
    return params, manifest, Vocab.from_dict(meta["vocab"]), LanguageScriptRegistry.from_dict(meta["registry"])


def _prepare(cfg: RunConfig):
    corpus = load_corpus(
        cfg.resolve(cfg.corpus_dir), chunk_len=cfg.chunk_len, val_fraction=cfg.val_fraction,
        max_vocab=cfg.vocab.max_size, min_frequency=cfg.vocab.min_frequency,
    )
    model_cfg = cfg.model_config(len(corpus.vocab), corpus.registry, cfg.chunk_len)
    return corpus, model_cfg


def cmd_build_vocab(args) -> int:
    cfg = load_run_config(args.config)
    out = cfg.resolve(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus_dir = cfg.resolve(cfg.corpus_dir)
    vocab = build_vocab_from_dir(corpus_dir, cfg.vocab.max_size, cfg.vocab.min_frequency)
    registry = register_corpus(corpus_dir)
    vocab.save(out / "vocab.json")
    registry.save(out / "registry.json")
    print(f"vocab size {len(vocab)}, {registry.num_languages} languages, {registry.num_scripts} scripts")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    corpus, model_cfg = _prepare(cfg)
    tc = cfg.train_config()
    out = cfg.resolve(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus.vocab.save(out / "vocab.json")
    corpus.registry.save(out / "registry.json")
    result = train(tc, model_cfg, corpus, output_dir=out, resume_from=args.resume)
    last = result.metrics[-1]["step"] if result.metrics else 0
    final = out / checkpoint_name(last)
    if result.metrics and final not in result.checkpoints:
        manifest = CheckpointManifest(config=model_cfg, step=last, meta={
            "vocab": corpus.vocab.to_dict(), "registry": corpus.registry.to_dict(),
            "train_config": tc.to_dict(), "chunk_len": corpus.chunk_len})
        save_checkpoint(result.params, manifest, final)
    summary = {"run_config": cfg.echo(), "model_config": model_cfg.to_dict(), "final_step": last,
               "best_step": result.best_step, "best_val_loss": result.best_val_loss,
               "stopped_early": result.stopped_early, "final_checkpoint": final.name}
    if args.stamp:
        summary["created"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(str(final))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    corpus, model_cfg = _prepare(cfg)
    tc = cfg.train_config()
    pdir = args.parallel_dir or (str(cfg.resolve(cfg.eval.parallel_dir)) if cfg.eval.parallel_dir else None)
    parallel = load_parallel(pdir, cfg.eval.max_pairs) if pdir else None
    report = ablation_run(corpus, model_cfg, tc, steps=args.steps, parallel=parallel,
                          layer=cfg.eval.layer, k=cfg.eval.k)
    print(report.table())
    rep = EvalReport("ablation", report.to_dict(), {"run_config": cfg.echo()})
    _write_report(rep, cfg.resolve(cfg.output_dir), "ablation.json", args.stamp)
    return EXIT_OK


def _layer(args, config: ModelConfig) -> int:
    if args.layer is not None:
        return args.layer
    if config.num_layers >= 8:
        return 8
    raise UsageError(f"model has {config.num_layers} layers; pass --layer explicitly")


def cmd_eval_retrieval(args) -> int:
    params, manifest, vocab, _ = _load_model(args.checkpoint)
    layer = _layer(args, manifest.config)
    parallel = load_parallel(args.parallel_dir, args.max_pairs)
    table = retrieval_table(params, manifest.config, vocab, parallel, layer, args.k, args.source)
    payload = {"k": args.k, "layer": layer, "source": args.source or next(iter(parallel)),
               "accuracy": table, "mean": float(np.mean(list(table.values())))}
    report = EvalReport("retrieval", payload, {"args": _argdict(args)}, Path(args.checkpoint).name)
    _write_report(report, Path(args.output_dir), "retrieval.json", args.stamp)
    return EXIT_OK


def cmd_eval_similarity(args) -> int:
    params, manifest, vocab, _ = _load_model(args.checkpoint)
    layer = _layer(args, manifest.config)
    parallel = load_parallel(args.parallel_dir, args.max_pairs)
    sim = similarity_from_model(params, manifest.config, vocab, parallel, layer, args.n)
    report = EvalReport("similarity", {"layer": layer, **sim.to_dict()}, {"args": _argdict(args)},
                        Path(args.checkpoint).name)
    _write_report(report, Path(args.output_dir), "similarity.json", args.stamp)
    return EXIT_OK


def cmd_eval_improvement(args) -> int:
    mats = []
    for p in (args.base, args.model):
        rep = EvalReport.load(p)
        if rep.kind != "similarity":
            raise DataError(f"{p} is a {rep.kind!r} report, expected 'similarity'")
        vals = [[np.nan if v is None else v for v in row] for row in rep.payload["values"]]
        mats.append(SimilarityMatrix(rep.payload["labels"], np.asarray(vals, dtype=np.float64)))
    imp = similarity_improvement(*mats)
    report = EvalReport("improvement", imp.to_dict(), {"args": _argdict(args)})
    _write_report(report, Path(args.output_dir), "improvement.json", args.stamp)
    return EXIT_OK


def cmd_donor(args) -> int:
    params, manifest, _, registry = _load_model(args.checkpoint)
    if "lang_emb" not in params:
        raise DataError("checkpoint has no language embedding table")
    codes = lang_codes_from_registry(registry)
    target = _lang_code(registry, args.target)
    donors = [_lang_code(registry, d) for d in args.donors.split(",") if d.strip()]
    donor, sims = donor_select(params["lang_emb"], codes, target, donors)
    print(donor)
    report = EvalReport("donor", {"target": target, "donor": donor, "similarity": sims},
                        {"args": _argdict(args)}, Path(args.checkpoint).name)
    _write_report(report, Path(args.output_dir), "donor.json", args.stamp)
    return EXIT_OK


def _lang_code(registry, code: str) -> str:
    code = code.strip()
    lid = registry.lang_id(code)
    return lang_codes_from_registry(registry)[lid]


def cmd_pca(args) -> int:
    params, _, _, registry = _load_model(args.checkpoint)
    name = {"lang": "lang_emb", "script": "script_emb"}[args.table]
    if name not in params:
        raise DataError(f"checkpoint has no {name} table")
    if args.table == "lang":
        labels = lang_codes_from_registry(registry)
    else:
        labels = [""] * registry.num_scripts
        for code, i in registry.script_ids.items():
            labels[i] = code
    res = pca_project(params[name], args.dims)
    payload = {"table": name, "labels": labels, "coords": res.coords,
               "explained_variance_ratio": res.explained_variance_ratio}
    out = Path(args.output_dir)
    report = EvalReport("pca", payload, {"args": _argdict(args)}, Path(args.checkpoint).name)
    _write_report(report, out, f"pca_{args.table}.json", args.stamp)
    svg = out / f"pca_{args.table}.svg"
    svg.write_text(pca_svg(res.coords, labels, f"PCA of {name}"), encoding="utf-8")
    print(str(svg))
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise DataError(f"checkpoint {str(path)!r} not found")
    header, start = read_header(path)
    load_checkpoint(path)  # full integrity check
    print(f"format {header['format']}  step {header['step']}  payload offset {start}")
    for entry in header["tensors"]:
        shape = "x".join(str(s) for s in entry["shape"])
        print(f"{entry['name']:<32} {shape:<12} {entry['dtype']}")
    return EXIT_OK


def _argdict(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "stamp")}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="langsamp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--stamp", action="store_true", help="add wall-clock metadata to outputs")
        return p

    p = add("build-vocab", cmd_build_vocab, "build vocab.json and registry.json")
    p.add_argument("--config", required=True)

    p = add("train", cmd_train, "pretrain with the MLM objective")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = add("ablate", cmd_ablate, "train the four embedding variants")
    p.add_argument("--config", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--parallel-dir")

    def eval_args(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--parallel-dir", required=True)
        p.add_argument("--layer", type=int)
        p.add_argument("--max-pairs", type=int)
        p.add_argument("--output-dir", default=".")

    p = add("eval-retrieval", cmd_eval_retrieval, "top-k parallel sentence retrieval")
    eval_args(p)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--source")

    p = add("eval-similarity", cmd_eval_similarity, "centred pairwise cosine similarity")
    eval_args(p)
    p.add_argument("--n", type=int, default=100)

    p = add("eval-improvement", cmd_eval_improvement, "percentage change between two similarity reports")
    p.add_argument("--base", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--output-dir", default=".")

    p = add("donor", cmd_donor, "pick the closest donor language")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--donors", required=True, help="comma-separated language codes")
    p.add_argument("--output-dir", default=".")

    p = add("pca", cmd_pca, "PCA of the language or script table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--table", choices=("lang", "script"), default="lang")
    p.add_argument("--dims", type=int, default=2)
    p.add_argument("--output-dir", default=".")

    p = add("inspect", cmd_inspect, "list a checkpoint's tensors")
    p.add_argument("checkpoint")
    return parser


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"missing subcommand (one of: {', '.join(COMMANDS)})")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfigError, CorpusError, CheckpointError, EvaluationError,
            KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
