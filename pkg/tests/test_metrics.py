import json
import math

import numpy as np
import pytest

from mtn_tmt.errors import ContractError, FormatError
from mtn_tmt.metrics import (bleu4, cider, cider_items, closest_ref_length, lcs_length, modified_precision,
                             read_hypotheses, read_references, rouge_l, rouge_l_item, score_corpus,
                             strip_eos, write_hypotheses)

from oracles import bleu4_oracle, cider_d_oracle, lcs_oracle, rouge_l_oracle

WORDS = list("abcdefgh")


def random_corpus(rng, items=None, max_refs=3, max_len=9):
    items = items or int(rng.integers(2, 8))
    corpus = []
    for _ in range(items):
        hyp = list(rng.choice(WORDS, size=int(rng.integers(1, max_len))))
        refs = [list(rng.choice(WORDS, size=int(rng.integers(1, max_len))))
                for _ in range(int(rng.integers(1, max_refs + 1)))]
        corpus.append((hyp, refs))
    return corpus


def overlapping_corpus(rng):
    """Hypotheses copied from a reference with a few substitutions, so 4-gram matches are common."""
    corpus = []
    for _ in range(int(rng.integers(2, 8))):
        refs = [list(rng.choice(WORDS[:4], size=int(rng.integers(4, 10)))) for _ in range(int(rng.integers(1, 4)))]
        hyp = list(refs[0])
        for i in rng.choice(len(hyp), size=min(2, len(hyp)), replace=False):
            hyp[i] = str(rng.choice(WORDS))
        corpus.append((hyp, refs))
    return corpus


@pytest.mark.parametrize("seed", range(50))
def test_oracle_agreement(seed):
    rng = np.random.default_rng(seed)
    corpus = overlapping_corpus(rng) if seed % 2 else random_corpus(rng)
    assert abs(bleu4(corpus) - bleu4_oracle(corpus)) < 1e-12
    assert rouge_l(corpus) == pytest.approx(rouge_l_oracle(corpus), abs=1e-12)
    assert abs(cider(corpus) - cider_d_oracle(corpus)) < 1e-9


def test_oracle_corpora_exercise_nonzero_bleu():
    scores = [bleu4(overlapping_corpus(np.random.default_rng(s))) for s in range(1, 50, 2)]
    assert sum(s > 0 for s in scores) >= 10


def test_lcs_matches_recursive_oracle():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a = list(rng.choice(WORDS[:3], size=int(rng.integers(0, 10))))
        b = list(rng.choice(WORDS[:3], size=int(rng.integers(0, 10))))
        assert lcs_length(a, b) == lcs_oracle(a, b)


def test_bleu_perfect_match():
    s = "a b c d e".split()
    assert bleu4([(s, [s])]) == 1.0


def test_clipped_unigram_precision():
    assert modified_precision("the the the".split(), ["the cat".split()], 1) == (1, 3)


def test_bleu_without_4gram_overlap_is_zero():
    assert bleu4([("a b c d".split(), ["a b c x".split()])]) == 0.0


def test_closest_reference_length_prefers_shorter_on_tie():
    assert closest_ref_length(4, [[1] * 3, [1] * 5]) == 3
    assert closest_ref_length(4, [[1] * 6, [1] * 5]) == 5


def test_bleu_duplicate_item_invariance():
    for seed in range(20):
        corpus = overlapping_corpus(np.random.default_rng(seed))
        doubled = corpus + [corpus[0]]
        scaled = corpus * 2
        assert bleu4(scaled) == pytest.approx(bleu4(corpus), abs=1e-12)
        assert 0.0 <= bleu4(doubled) <= 1.0


def test_rouge_anchor():
    score = rouge_l_item("a b c d".split(), ["a c d".split()])
    assert abs(score - 2.44 * 0.75 / (1 + 1.44 * 0.75)) < 1e-12
    assert round(score, 5) == 0.87981


def test_rouge_identical_and_empty():
    s = "x y z".split()
    assert rouge_l([(s, [s])]) == 1.0
    assert rouge_l([([], [s])]) == 0.0


def test_rouge_takes_best_reference():
    assert rouge_l_item("a b".split(), ["z".split(), "a b".split()]) == 1.0


def test_cider_disjoint_vocabulary_identity():
    a, b = "a b c d e".split(), "v w x y z".split()
    scores = cider_items([(a, [a]), (b, [b])])
    assert scores == pytest.approx([10.0, 10.0], abs=1e-12)


def test_cider_empty_hypothesis_scores_zero():
    scores = cider_items([([], ["a b".split()]), ("c d".split(), ["c d".split()])])
    assert scores[0] == 0.0


def test_cider_needs_two_items():
    with pytest.raises(ContractError, match="document frequenc"):
        cider([("a".split(), ["a".split()])])


@pytest.mark.parametrize("fn", [bleu4, rouge_l, cider])
def test_empty_corpus_raises(fn):
    with pytest.raises(ContractError):
        fn([])


def test_missing_reference_raises():
    with pytest.raises(ContractError):
        bleu4([("a".split(), [])])


def test_order_invariance_and_bounds():
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        corpus = overlapping_corpus(rng)
        shuffled = [corpus[i] for i in rng.permutation(len(corpus))]
        a, b = score_corpus(corpus), score_corpus(shuffled)
        for key in a:
            assert a[key] == pytest.approx(b[key], abs=1e-12)
        assert 0.0 <= a["BLEU-4"] <= 1.0
        assert 0.0 <= a["ROUGE-L"] <= 1.0
        assert 0.0 <= a["CIDEr"] <= 10.0 + 1e-12


def test_eos_is_stripped():
    assert strip_eos(["a", "b", "<eos>", "c"]) == ["a", "b"]
    s = "a b c d".split()
    assert bleu4([(s + ["<eos>"], [s])]) == 1.0


def test_hypothesis_file_round_trip(tmp_path):
    rows = {"d1#0": "a b c", "d2#1": ""}
    write_hypotheses(tmp_path / "h.txt", rows)
    assert read_hypotheses(tmp_path / "h.txt") == rows


def test_hypothesis_file_without_tab(tmp_path):
    (tmp_path / "h.txt").write_text("no tab here\n")
    with pytest.raises(FormatError, match=":1:"):
        read_hypotheses(tmp_path / "h.txt")


def test_reference_file(tmp_path):
    path = tmp_path / "r.jsonl"
    path.write_text(json.dumps({"key": "k", "references": ["a b", "c"]}) + "\n\n")
    assert read_references(path) == {"k": ["a b", "c"]}
    path.write_text('{"key": "k"}\n')
    with pytest.raises(FormatError):
        read_references(path)


def test_brevity_penalty_applies():
    ref = "a b c d e f g h".split()
    hyp = ref[:4]
    assert bleu4([(hyp, [ref])]) == pytest.approx(math.exp(1 - 8 / 4), abs=1e-12)
