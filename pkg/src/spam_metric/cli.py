"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import datagen, stats
from .config import ConfigError, RunConfig, load_config, write_config
from .domain import ManifestError, read_manifest, read_wav
from .dsp import PhonemizeError
from .scorer import Scorer, proxy_mos, table_scores
from .training import CheckpointError, TrainingDiverged, save_checkpoint, train, write_metrics

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

logger = logging.getLogger("spam_metric")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", default=argparse.SUPPRESS, help="run configuration (JSON)")
    parent.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    parent.add_argument(
        "--deterministic", action="store_true", default=argparse.SUPPRESS,
        help="single-threaded, fixed-seed execution",
    )
    return parent


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="spam-metric", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    p.add_argument("--out", help="output directory (default: paths.data_dir)")
    p.add_argument("--n", type=int, default=540)
    p.add_argument("--spec", help="generation spec (JSON)")

    p = sub.add_parser("train", parents=[common], help="train a scorer")
    p.add_argument("--manifest", help="default: <paths.data_dir>/manifest.jsonl")
    p.add_argument("--checkpoint", help="default: paths.checkpoint")
    p.add_argument("--metrics", help="default: <checkpoint>.metrics.jsonl")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--eval-every", type=int)

    p = sub.add_parser("score", parents=[common], help="score speech against prompts")
    p.add_argument("--checkpoint", help="default: paths.checkpoint")
    p.add_argument("--audio")
    p.add_argument("--transcript")
    p.add_argument("--prompt")
    p.add_argument("--manifest")
    p.add_argument("--variants")
    p.add_argument("--out", help="score table CSV (batch mode)")

    p = sub.add_parser("eval", parents=[common], help="plausibility / faithfulness reports")
    esub = p.add_subparsers(dest="experiment", required=True, parser_class=_Parser)
    pp = esub.add_parser("plausibility", parents=[common])
    pp.add_argument("--scores", required=True)
    pp.add_argument("--mos", required=True)
    pp.add_argument("--out-dir", help="default: paths.reports_dir")
    pf = esub.add_parser("faithfulness", parents=[common])
    pf.add_argument("--scores", required=True)
    pf.add_argument("--alpha", type=float)
    pf.add_argument("--out-dir", help="default: paths.reports_dir")

    p = sub.add_parser("proxy-mos", parents=[common], help="constructed MOS table from a variants file")
    p.add_argument("--variants", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scores", help="restrict to pairs present in this score table")
    return parser


def _resolve_config(args) -> RunConfig:
    config = load_config(getattr(args, "config", None))
    if hasattr(args, "seed"):
        config = config.with_seed(args.seed)
    if getattr(args, "deterministic", False):
        config = dataclasses.replace(config, train=dataclasses.replace(config.train, deterministic=True))
    return config


def _atomic_write(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def cmd_gen_data(args, config: RunConfig) -> int:
    out = Path(args.out or config.paths.data_dir)
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    spec_data = json.loads(Path(args.spec).read_text(encoding="utf-8")) if args.spec else {}
    spec_data.update(n_items=args.n, seed=config.seed)
    spec = datagen.GenerationSpec.from_json(spec_data)
    manifest = datagen.generate_corpus(spec, out)
    variants = datagen.corpus_variants(manifest, config.seed)
    datagen.write_variants(variants, out / "variants.jsonl")
    (out / "generation_spec.json").write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n")
    write_config(config, out / "config.json")
    counts = {s: len(manifest.split(s)) for s in ("train", "dev", "test")}
    print(f"wrote {len(manifest)} records to {out} "
          f"(train {counts['train']}, dev {counts['dev']}, test {counts['test']}); "
          f"{len(variants)} variant sets")
    return EXIT_OK


def cmd_train(args, config: RunConfig) -> int:
    manifest_path = Path(args.manifest or Path(config.paths.data_dir) / "manifest.jsonl")
    ckpt_path = Path(args.checkpoint or config.paths.checkpoint)
    metrics_path = Path(args.metrics or str(ckpt_path) + ".metrics.jsonl")
    overrides = {
        "max_steps": args.max_steps, "batch_size": args.batch_size, "lr": args.lr,
        "patience": args.patience, "eval_every": args.eval_every,
    }
    train_cfg = dataclasses.replace(config.train, **{k: v for k, v in overrides.items() if v is not None})
    config = dataclasses.replace(config, train=train_cfg)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest not found: {manifest_path}")
    manifest = read_manifest(manifest_path)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    result = train(manifest, config.train, config.model, config.loss)
    _atomic_write(ckpt_path, lambda p: save_checkpoint(result.checkpoint, p))
    write_metrics(result.metrics, metrics_path)
    write_config(config, ckpt_path.with_name(ckpt_path.name + ".config.json"))
    print(f"checkpoint {ckpt_path} (best step {result.best_step}, "
          f"dev L_con {result.checkpoint.config['best_dev_L_con']:.4f})")
    return EXIT_OK


def cmd_score(args, config: RunConfig) -> int:
    ckpt = Path(args.checkpoint or config.paths.checkpoint)
    single = args.audio is not None or args.prompt is not None
    batch = args.manifest is not None or args.variants is not None
    if single == batch:
        raise UsageError("give either --audio/--transcript/--prompt or --manifest/--variants/--out")
    if single and (args.audio is None or args.prompt is None or args.transcript is None):
        raise UsageError("single-pair mode needs --audio, --transcript and --prompt")
    if batch and (args.manifest is None or args.variants is None or args.out is None):
        raise UsageError("batch mode needs --manifest, --variants and --out")
    scorer = Scorer.from_checkpoint(ckpt)
    if single:
        value = scorer.score(read_wav(args.audio), args.transcript, args.prompt)
        print(repr(value))
        return EXIT_OK
    manifest = read_manifest(args.manifest)
    variants = datagen.read_variants(args.variants)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n_rows = 0
    with open(out, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(stats.ScoreTable.HEADER) + "\n")
        for row in scorer.iter_variant_rows(manifest, variants):
            fh.write(f"{row.item_id},{row.variant},{row.variant_idx},{row.score!r}\n")
            n_rows += 1
    print(f"wrote {n_rows} scores for {len(variants)} items to {out}")
    return EXIT_OK


def cmd_eval(args, config: RunConfig) -> int:
    out_dir = Path(args.out_dir or config.paths.reports_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = stats.ScoreTable.read_csv(args.scores)
    if args.experiment == "faithfulness":
        alpha = args.alpha if args.alpha is not None else config.eval.alpha
        report = stats.faithfulness_report(table, alpha)
        stem = "faithfulness"
    else:
        report = stats.plausibility_report(table_scores(table), stats.MosTable.read_csv(args.mos))
        stem = "plausibility"
    stats.write_report(report, out_dir / f"{stem}.txt", out_dir / f"{stem}.json")
    write_config(config, out_dir / f"{stem}.config.json")
    print(report.format())
    return EXIT_OK


def cmd_proxy_mos(args, config: RunConfig) -> int:
    table = proxy_mos(datagen.read_variants(args.variants))
    if args.scores:
        keep = table_scores(stats.ScoreTable.read_csv(args.scores))
        table = stats.MosTable((k, v) for k, v in table.mos.items() if k in keep)
    table.write_csv(args.out)
    print(f"wrote {len(table)} MOS rows to {args.out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "proxy-mos": cmd_proxy_mos,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        config = _resolve_config(args)
        return COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(f"spam-metric: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ManifestError, CheckpointError, stats.StatsError, PhonemizeError,
            FileNotFoundError, KeyError, ValueError) as exc:
        print(f"spam-metric: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, RuntimeError, OSError) as exc:
        print(f"spam-metric: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
