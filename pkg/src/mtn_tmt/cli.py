"""Command-line entry point: ``mtn-tmt <subcommand> ...``.

Exit status is 0 on success, 2 for configuration or contract errors, 3 for
data and format errors and 4 for numeric failures. Every failure prints one
JSON object on a single line of standard error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

from . import __doc__ as package_doc
from .config import HELP, RunConfig
from .data import Dataset, SyntheticSpec, Vocabulary, build_vocab, generate_synthetic, resolve_path
from .errors import ConfigError, MtnTmtError, NumericError
from .evaluation import evaluate_run, generate_answers, load_trained, repeat_runs
from .gradcheck import MODULES, STEP, run_checks
from .metrics import read_hypotheses, write_hypotheses
from .training import grid_search, train

log = logging.getLogger("mtn_tmt")

# per-invocation manifest; datasets keep their own manifest.json
ARTIFACTS = "artifacts.json"
DEFAULT_GRID = "0,0.1,0.3,0.5,0.8,1.0"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _show(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if value == "" else str(value)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per run-config key; unset flags leave the config file (or default) value alone."""
    parser.add_argument("--config", help="flat key = value config file (default: none)")
    group = parser.add_argument_group("run config (flags override the config file)")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        text = f"{HELP[f.name]} (default: {_show(f.default)})"
        if f.type in ("bool", bool):
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None, help=text)
        else:
            kind = {"int": int, "float": float}.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
            group.add_argument(flag, dest=f.name, type=kind, default=None, help=text)


def effective_config(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig)}
    if args.config:
        return RunConfig.from_file(resolve_path(args.config), **overrides)
    return RunConfig.from_mapping({k: v for k, v in overrides.items() if v is not None})


def _number(value: float):
    """JSON has no infinity: a run without epochs reports null."""
    return value if math.isfinite(value) else None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, args, config: RunConfig | None = None, **extra) -> None:
    files = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != ARTIFACTS)
    flags = {k: v for k, v in vars(args).items() if k not in ("handler",) and v is not None}
    body = {"command": command, "flags": flags, "files": files, **extra}
    if config is not None:
        body["config"] = config.to_dict()
    (out / ARTIFACTS).write_text(json.dumps(body, indent=2, sort_keys=True, default=str) + "\n")


def _vocab_for(config: RunConfig, train_set: Dataset) -> Vocabulary:
    if config.vocab:
        return Vocabulary.load(resolve_path(config.vocab))
    return build_vocab([train_set.root / train_set.manifest.dialogs], config.min_count)


def _datasets(config: RunConfig) -> tuple[Dataset, Dataset]:
    if not config.train_data:
        raise ConfigError("train_data is not set (use --train-data or the config file)")
    train_set = Dataset(config.train_data)
    dev_set = Dataset(config.dev_data) if config.dev_data else train_set
    return train_set, dev_set


def _float_list(text: str, name: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise ConfigError(f"{name} is empty")
    return values


# -- subcommands ------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SyntheticSpec.from_text(Path(args.spec).read_text()) if args.spec else SyntheticSpec()
    for key in ("dialogs", "turns", "noise"):
        if getattr(args, key) is not None:
            spec = dataclasses.replace(spec, **{key: getattr(args, key)})
    spec.validate()
    out = _out_dir(args)
    generate_synthetic(spec, args.seed, out)
    write_manifest(out, "gen-data", args, spec=dataclasses.asdict(spec), seed=args.seed)
    print(f"wrote {spec.dialogs} dialogs to {out}")
    return 0


def cmd_build_vocab(args) -> int:
    paths = []
    for item in args.corpus:
        path = resolve_path(item)
        paths.append(path / "dialogs.jsonl" if path.is_dir() else path)
    vocab = build_vocab(paths, args.min_count)
    out = _out_dir(args)
    vocab.save(out / "vocab.txt")
    write_manifest(out, "build-vocab", args, size=len(vocab))
    print(f"wrote {len(vocab)} tokens to {out / 'vocab.txt'}")
    return 0


def cmd_train(args) -> int:
    config = effective_config(args)
    train_set, dev_set = _datasets(config)
    vocab = _vocab_for(config, train_set)
    out = _out_dir(args)
    result = train(config, train_set, dev_set, vocab, out_dir=out)
    write_manifest(out, "train", args, config, best_dev_perplexity=_number(result.record.best_dev_perplexity))
    if result.record.epochs:
        print(f"best dev perplexity {result.record.best_dev_perplexity:.4f} at epoch {result.record.best_epoch}")
    else:
        print("no epochs run")
    return 0


def cmd_grid_search(args) -> int:
    config = effective_config(args)
    train_set, dev_set = _datasets(config)
    vocab = _vocab_for(config, train_set)
    out = _out_dir(args)
    alphas, betas = _float_list(args.alpha_grid, "alpha grid"), _float_list(args.beta_grid, "beta grid")
    result = grid_search(config, alphas, betas, train_set, dev_set, vocab, jobs=args.jobs, out_dir=out)
    rows = [{"type": "point", "alpha": a, "beta": b, "best_dev_perplexity": _number(r.best_dev_perplexity),
             "best_epoch": r.best_epoch, "seed": r.seed} for a, b, r in result.points]
    rows.append({"type": "winner", "alpha": result.alpha, "beta": result.beta,
                 "best_dev_perplexity": _number(result.record.best_dev_perplexity), "config": config.to_dict()})
    (out / "grid.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    write_manifest(out, "grid-search", args, config, winner={"alpha": result.alpha, "beta": result.beta})
    print(f"winner alpha={result.alpha} beta={result.beta} "
          f"dev perplexity {result.record.best_dev_perplexity:.4f}")
    return 0


def _load(args, dataset):
    config_path = resolve_path(args.config) if args.config else None
    vocab_path = resolve_path(args.vocab) if args.vocab else None
    return load_trained(resolve_path(args.checkpoint), config_path, vocab_path, dataset)


def cmd_evaluate(args) -> int:
    dataset = Dataset(args.data)
    if args.refs == "n" and not args.references:
        raise ConfigError("--refs n needs --references (JSON lines with key and references)")
    references = resolve_path(args.references) if args.refs == "n" else None
    model = vocab = config = None
    if args.checkpoint:
        model, config, vocab = _load(args, dataset)
    hypotheses = read_hypotheses(resolve_path(args.hypotheses)) if args.hypotheses else None
    report, hyps = evaluate_run(model, dataset, vocab, args.mode, args.beam_width, references, hypotheses,
                                args.max_len, settings={"checkpoint": args.checkpoint, "data": args.data})
    out = _out_dir(args)
    report.write(out)
    write_hypotheses(out / "hypotheses.txt", hyps)
    write_manifest(out, "evaluate", args, config)
    print(report.table(), end="")
    return 0


def cmd_generate(args) -> int:
    dataset = Dataset(args.data)
    model, config, vocab = _load(args, dataset)
    hyps = generate_answers(model, dataset, vocab, args.mode, args.beam_width, args.max_len)
    out = _out_dir(args)
    write_hypotheses(out / "hypotheses.txt", hyps)
    write_manifest(out, "generate", args, config, examples=len(hyps))
    print(f"wrote {len(hyps)} hypotheses to {out / 'hypotheses.txt'}")
    return 0


def cmd_grad_check(args) -> int:
    config = effective_config(args)
    modules = [args.module] if args.module else list(MODULES)
    results = run_checks(modules, config, config.seed, args.step)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.module:<18} max relative error {r.max_error:.3e}  (< {r.tolerance:.0e})  "
              f"{r.coordinates} coordinates  {r.seconds:.1f}s  {status}")
    if args.out:
        out = _out_dir(args)
        rows = [{**dataclasses.asdict(r), "passed": r.passed} for r in results]
        (out / "gradcheck.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
        write_manifest(out, "grad-check", args, config)
    failed = [r.module for r in results if not r.passed]
    if failed:
        raise NumericError(f"gradient check failed for {', '.join(failed)}")
    return 0


def cmd_repeat(args) -> int:
    config = effective_config(args)
    train_set, dev_set = _datasets(config)
    vocab = _vocab_for(config, train_set)
    out = _out_dir(args)
    result = repeat_runs(config, train_set, dev_set, vocab, args.n, args.seed_base, out, args.mode,
                         args.beam_width)
    lines = [json.dumps({"type": "config", **config.to_dict()}, sort_keys=True) + "\n", result.records()]
    (out / "repeat.jsonl").write_text("".join(lines))
    (out / "repeat.txt").write_text(result.table())
    write_manifest(out, "repeat", args, config)
    print(result.table(), end="")
    return 0


# -- parser ------------------------------------------------------------------------------------

def _decoding_flags(p) -> None:
    p.add_argument("--mode", choices=("greedy", "beam"), default="greedy", help="decoding mode (default: greedy)")
    p.add_argument("--beam-width", type=int, default=1, help="beam width (default: 1)")
    p.add_argument("--max-len", type=int, default=None,
                   help="answer length limit (default: the run config's max_answer_len)")


def _checkpoint_flags(p, required: bool) -> None:
    p.add_argument("--checkpoint", required=required,
                   help="checkpoint file; config.txt and vocab.txt are read from its directory"
                        + ("" if required else " (default: none)"))
    p.add_argument("--config", help="config file overriding the run directory copy (default: none)")
    p.add_argument("--vocab", help="vocabulary file overriding the run directory copy (default: none)")
    p.add_argument("--data", required=True, help="dataset directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mtn-tmt", description=package_doc,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--spec", help="synthetic spec file, key = value (default: built-in spec)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    p.add_argument("--dialogs", type=int, help="override the synthetic dialog count (default: from --spec)")
    p.add_argument("--turns", type=int, help="override the synthetic turns per dialog (default: from --spec)")
    p.add_argument("--noise", type=float, help="override the synthetic feature noise (default: from --spec)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("build-vocab", help="build a vocabulary from dialog files or dataset directories")
    p.add_argument("--corpus", nargs="+", required=True, help="dialog files or dataset directories")
    p.add_argument("--min-count", type=int, default=1, help="minimum token count (default: 1)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_build_vocab)

    for name, handler, text in (("train", cmd_train, "train one model"),
                                ("grid-search", cmd_grid_search, "train every (alpha, beta) grid point"),
                                ("repeat", cmd_repeat, "train n seeds and report mean and std")):
        p = sub.add_parser(name, help=text)
        _add_config_flags(p)
        p.add_argument("--out", required=True, help="output directory")
        if name == "grid-search":
            p.add_argument("--alpha-grid", default=DEFAULT_GRID, help=f"alpha values (default: {DEFAULT_GRID})")
            p.add_argument("--beta-grid", default=DEFAULT_GRID, help=f"beta values (default: {DEFAULT_GRID})")
            p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default: 1)")
        if name == "repeat":
            p.add_argument("--n", type=int, default=3, help="number of runs (default: 3)")
            p.add_argument("--seed-base", type=int, default=0, help="first seed (default: 0)")
            _decoding_flags(p)
        p.set_defaults(handler=handler)

    p = sub.add_parser("evaluate", help="generate answers and write a metric report")
    _checkpoint_flags(p, required=False)
    p.add_argument("--refs", choices=("1", "n"), default="1",
                   help="1: gold answer as the only reference; n: read --references (default: 1)")
    p.add_argument("--references", help="JSON lines with key and references (default: none)")
    p.add_argument("--hypotheses", help="score this hypothesis file instead of generating (default: none)")
    _decoding_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("generate", help="write a hypothesis file")
    _checkpoint_flags(p, required=True)
    _decoding_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("grad-check", help="finite-difference gradient validation")
    _add_config_flags(p)
    p.add_argument("--module", choices=MODULES, help="check a single module (default: all)")
    p.add_argument("--step", type=float, default=STEP, help=f"central-difference step (default: {STEP})")
    p.add_argument("--out", help="output directory for gradcheck.jsonl (default: none)")
    p.set_defaults(handler=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        return args.handler(args)
    except MtnTmtError as exc:
        return _fail(type(exc).__name__, exc.exit_code, str(exc))
    except FileNotFoundError as exc:
        return _fail("FormatError", 3, f"{exc.filename}: {exc.strerror}")


def _fail(kind: str, code: int, message: str) -> int:
    line = json.dumps({"error": kind, "exit": code, "message": " ".join(message.split())})
    print(line, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
