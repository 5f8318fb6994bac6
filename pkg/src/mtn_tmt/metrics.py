"""Corpus BLEU-4, ROUGE-L and CIDEr-D over tokenised hypotheses and references.

A corpus is a list of ``(hypothesis, references)`` pairs where every
sentence is a list of tokens and there is at least one reference per item.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from pathlib import Path
from typing import Sequence

from .data import EOS
from .errors import ContractError, FormatError

Sentence = Sequence[str]
Corpus = Sequence[tuple[Sentence, Sequence[Sentence]]]

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0


def strip_eos(tokens: Sentence) -> list[str]:
    out = list(tokens)
    return out[:out.index(EOS)] if EOS in out else out


def _check(corpus: Corpus) -> None:
    if not corpus:
        raise ContractError("metric needs a nonempty corpus")
    for i, (_, refs) in enumerate(corpus):
        if not refs:
            raise ContractError(f"item {i} has no reference")


def ngrams(tokens: Sentence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU ----------------------------------------------------------------------------

def modified_precision(hypothesis: Sentence, references: Sequence[Sentence], n: int) -> tuple[int, int]:
    """(clipped matches, hypothesis n-gram count) with max-over-reference clipping."""
    counts = ngrams(hypothesis, n)
    ceiling: Counter = Counter()
    for ref in references:
        for gram, c in ngrams(ref, n).items():
            ceiling[gram] = max(ceiling[gram], c)
    clipped = sum(min(c, ceiling[g]) for g, c in counts.items())
    return clipped, max(0, len(hypothesis) - n + 1)


def closest_ref_length(hyp_len: int, references: Sequence[Sentence]) -> int:
    return min((abs(len(r) - hyp_len), len(r)) for r in references)[1]


def bleu4(corpus: Corpus, max_n: int = 4) -> float:
    """Corpus BLEU with closest-length brevity penalty and no smoothing."""
    _check(corpus)
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, refs in corpus:
        hyp, refs = strip_eos(hyp), [strip_eos(r) for r in refs]
        hyp_len += len(hyp)
        ref_len += closest_ref_length(len(hyp), refs)
        for n in range(1, max_n + 1):
            m, t = modified_precision(hyp, refs, n)
            matches[n - 1] += m
            totals[n - 1] += t
    if hyp_len == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return brevity * math.exp(log_p)


# -- ROUGE-L -------------------------------------------------------------------------

def lcs_length(a: Sentence, b: Sentence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_item(hypothesis: Sentence, references: Sequence[Sentence], beta: float = ROUGE_BETA) -> float:
    best = 0.0
    for ref in references:
        lcs = lcs_length(hypothesis, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(hypothesis), lcs / len(ref)
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


def rouge_l(corpus: Corpus) -> float:
    _check(corpus)
    return sum(rouge_l_item(strip_eos(h), [strip_eos(r) for r in refs]) for h, refs in corpus) / len(corpus)


# -- CIDEr-D ---------------------------------------------------------------------------

class _CiderD:
    def __init__(self, corpus: Corpus, n: int = 4, sigma: float = CIDER_SIGMA):
        self.n, self.sigma = n, sigma
        self.df: Counter = Counter()
        for _, refs in corpus:
            seen = set()
            for ref in refs:
                for k in range(1, n + 1):
                    seen.update(ngrams(ref, k))
            self.df.update(seen)
        self.log_items = math.log(float(len(corpus)))

    def vector(self, tokens: Sentence):
        vec = [dict() for _ in range(self.n)]
        norms = [0.0] * self.n
        for k in range(1, self.n + 1):
            for gram, tf in ngrams(tokens, k).items():
                w = tf * (self.log_items - math.log(max(1.0, self.df[gram])))
                vec[k - 1][gram] = w
                norms[k - 1] += w * w
        return vec, [math.sqrt(x) for x in norms], len(tokens)

    def similarity(self, hyp, ref) -> float:
        (vh, nh, lh), (vr, nr, lr) = hyp, ref
        penalty = math.exp(-((lh - lr) ** 2) / (2 * self.sigma ** 2))
        total = 0.0
        for k in range(self.n):
            val = sum(min(w, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, w in vh[k].items())
            if nh[k] != 0 and nr[k] != 0:
                val /= nh[k] * nr[k]
            total += val * penalty
        return total / self.n

    def item(self, hypothesis: Sentence, references: Sequence[Sentence]) -> float:
        hv = self.vector(hypothesis)
        return 10.0 * sum(self.similarity(hv, self.vector(r)) for r in references) / len(references)


def cider_items(corpus: Corpus) -> list[float]:
    _check(corpus)
    if len(corpus) < 2:
        raise ContractError("CIDEr needs at least 2 items: document frequencies are degenerate otherwise")
    cleaned = [(strip_eos(h), [strip_eos(r) for r in refs]) for h, refs in corpus]
    scorer = _CiderD(cleaned)
    return [scorer.item(h, refs) for h, refs in cleaned]


def cider(corpus: Corpus) -> float:
    """CIDEr-D: clipped TF-IDF n-gram cosine with a Gaussian length penalty, times 10."""
    scores = cider_items(corpus)
    return sum(scores) / len(scores)


# -- files and reports ------------------------------------------------------------------

def read_hypotheses(path) -> dict[str, str]:
    """``key<TAB>text`` per line."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        key, sep, text = line.partition("\t")
        if not sep:
            raise FormatError(f"{path}:{lineno}: expected id<TAB>hypothesis")
        out[key] = text
    return out


def write_hypotheses(path, rows: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, text in rows.items():
            fh.write(f"{key}\t{text}\n")


def read_references(path) -> dict[str, list[str]]:
    """JSON lines ``{"key": ..., "references": [...]}`` for multi-reference scoring."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            out[str(row["key"])] = [str(r) for r in row["references"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}:{lineno}: malformed reference record ({exc})") from None
    return out


def score_corpus(corpus: Corpus) -> dict[str, float]:
    return {"BLEU-4": bleu4(corpus), "ROUGE-L": rouge_l(corpus), "CIDEr": cider(corpus)}

