"""Generation-based evaluation runs, metric reports and the repeat runner."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .config import RunConfig
from .data import Dataset, Vocabulary, batch_and_pad, checkpoint_load, tokenize
from .errors import ConfigError, ContractError, FormatError
from .metrics import read_references, score_corpus
from .model import MtnTmt
from .training import build_model, mean_std, perplexity_eval, train

METRIC_KEYS = ("BLEU-4", "ROUGE-L", "CIDEr", "perplexity")


@dataclass
class Report:
    metrics: dict
    settings: dict = field(default_factory=dict)
    items: int = 0

    def to_dict(self) -> dict:
        return {"metrics": dict(self.metrics), "settings": dict(self.settings), "items": self.items}

    def table(self) -> str:
        """Aligned text table: one header row, one value row, then the generation settings."""
        cols = ["refs", *METRIC_KEYS]
        cells = [str(self.settings.get("refs", "1"))]
        for key in METRIC_KEYS:
            value = self.metrics[key]
            cells.append("n/a" if value is None else f"{value:.4f}")
        widths = [max(len(c), len(v)) for c, v in zip(cols, cells)]
        head = "  ".join(c.rjust(w) for c, w in zip(cols, widths))
        row = "  ".join(v.rjust(w) for v, w in zip(cells, widths))
        lines = [head, "-" * len(head), row, ""]
        lines += [f"{k}: {v}" for k, v in self.settings.items() if k != "config"]
        return "\n".join(lines) + "\n"

    def records(self) -> str:
        """JSON lines: one per metric plus one carrying the settings and effective config."""
        refs = self.settings.get("refs", "1")
        rows = [{"type": "metric", "name": k, "value": self.metrics[k], "refs": refs, "items": self.items}
                for k in METRIC_KEYS]
        rows.append({"type": "settings", **self.settings})
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.table())
        (out / "report.jsonl").write_text(self.records())


def load_trained(checkpoint, config_path=None, vocab_path=None,
                 dataset: Dataset | None = None) -> tuple[MtnTmt, RunConfig, Vocabulary]:
    """Rebuild a model from a checkpoint; config and vocabulary default to the run directory's copies."""
    checkpoint = Path(checkpoint)
    run_dir = checkpoint.parent
    config_path = Path(config_path) if config_path else run_dir / "config.txt"
    vocab_path = Path(vocab_path) if vocab_path else run_dir / "vocab.txt"
    if not config_path.exists():
        raise ConfigError(f"no config for checkpoint {checkpoint}: expected {config_path}")
    config = RunConfig.from_file(config_path)
    vocab = Vocabulary.load(vocab_path)
    model = build_model(config, vocab, dataset)
    checkpoint_load(model.store, checkpoint)
    return model, config, vocab


def generate_answers(model: MtnTmt, dataset: Dataset, vocab: Vocabulary, mode: str = "greedy",
                     beam_width: int = 1, max_len: int | None = None, batch_size: int = 32) -> dict[str, str]:
    """Decoded answer text per example key, in dataset order."""
    out = {}
    for batch in batch_and_pad(dataset.examples, batch_size, vocab, dataset, model.modalities):
        for key, gen in zip(batch.keys, model.generate(batch, mode, beam_width, max_len)):
            out[key] = vocab.decode(gen.tokens)
    return out


def reference_sets(dataset: Dataset, references=None) -> dict[str, list[str]]:
    """Gold answers as single references, or the multi-reference file when one is given."""
    if references is None:
        return {ex.key: [ex.answer] for ex in dataset.examples}
    table = read_references(references)
    missing = [ex.key for ex in dataset.examples if ex.key not in table]
    if missing:
        raise FormatError(f"reference file lacks {len(missing)} keys, first {missing[0]!r}")
    return {ex.key: table[ex.key] for ex in dataset.examples}


def score_texts(hypotheses: dict[str, str], references: dict[str, list[str]]) -> dict[str, float]:
    missing = [k for k in references if k not in hypotheses]
    if missing:
        raise FormatError(f"no hypothesis for {len(missing)} keys, first {missing[0]!r}")
    corpus = [(tokenize(hypotheses[k]), [tokenize(r) for r in refs]) for k, refs in references.items()]
    return score_corpus(corpus)


def evaluate_run(model: MtnTmt | None, dataset: Dataset, vocab: Vocabulary | None, mode: str = "greedy",
                 beam_width: int = 1, references=None, hypotheses: dict[str, str] | None = None,
                 max_len: int | None = None, settings: dict | None = None) -> tuple[Report, dict[str, str]]:
    """Generate (unless ``hypotheses`` is given), score every metric and measure perplexity.

    Without a model the perplexity entry is ``None``.
    """
    if model is None and hypotheses is None:
        raise ContractError("evaluation needs a model or a hypothesis file")
    if hypotheses is None:
        hypotheses = generate_answers(model, dataset, vocab, mode, beam_width, max_len)
    refs = reference_sets(dataset, references)
    scores = score_texts(hypotheses, refs)
    ppl = None
    if model is not None:
        batches = batch_and_pad(dataset.examples, model.config.batch_size, vocab, dataset, model.modalities)
        ppl = perplexity_eval(model, batches)
    n_refs = {len(r) for r in refs.values()}
    report_settings = {"mode": mode, "beam_width": beam_width, "refs": "1" if n_refs == {1} else "n",
                       "max_refs": max(n_refs)}
    if model is not None:
        report_settings["max_answer_len"] = max_len or model.config.max_answer_len
        report_settings["config"] = model.config.to_dict()
    report_settings.update(settings or {})
    return Report({**scores, "perplexity": ppl}, report_settings, len(refs)), hypotheses


@dataclass
class RepeatResult:
    seeds: list[int]
    reports: list[Report]
    summary: dict[str, tuple[float, float]]

    def records(self) -> str:
        rows = [{"type": "run", "seed": s, **r.metrics} for s, r in zip(self.seeds, self.reports)]
        rows += [{"type": "summary", "metric": k, "mean": m, "std": s} for k, (m, s) in self.summary.items()]
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)

    def table(self) -> str:
        lines = [f"{'metric':>10}  {'mean':>10}  {'std':>10}"]
        lines += [f"{k:>10}  {m:>10.4f}  {s:>10.4f}" for k, (m, s) in self.summary.items()]
        return "\n".join(lines) + f"\nruns: {len(self.seeds)} (seeds {', '.join(map(str, self.seeds))})\n"


def repeat_runs(config: RunConfig, train_set: Dataset, dev_set: Dataset, vocab: Vocabulary, n: int,
                seed_base: int, out_dir=None, mode: str = "greedy", beam_width: int = 1) -> RepeatResult:
    """Train ``n`` times with seeds ``seed_base + i`` and summarise dev metrics as mean and std."""
    if n < 1:
        raise ConfigError("repeat count must be >= 1")
    seeds = [seed_base + i for i in range(n)]
    reports = []
    for seed in seeds:
        run_dir = Path(out_dir) / f"seed{seed}" if out_dir else None
        result = train(config, train_set, dev_set, vocab, seed=seed, out_dir=run_dir)
        result.restore_best()
        report, _ = evaluate_run(result.model, dev_set, vocab, mode, beam_width)
        reports.append(report)
    summary = {}
    for key in METRIC_KEYS:
        values = [r.metrics[key] for r in reports]
        summary[key] = mean_std(values) if all(v is not None and math.isfinite(v) for v in values) \
            else (math.nan, math.nan)
    return RepeatResult(seeds, reports, summary)


def summarise(values: Sequence[float]) -> str:
    m, s = mean_std(values)
    return f"{m:.4f} ± {s:.4f}"
