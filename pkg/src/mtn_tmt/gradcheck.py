"""Finite-difference validation of every layer type and of the full model loss.

Each check builds a small instance with dropout off, keeps inputs away from
relu kinks and returns the max relative error of :func:`tensor.check_gradients`.
Layer checks jitter their parameters off the structured initial values; the
model check runs at the model's own initialisation on noisy features.

The model loss is O(1), so a central difference with step 1e-5 resolves a
coordinate's derivative only to about ulp(loss) / 1e-5 ~ 1e-11 absolute.
Coordinates whose derivative is below ~1e-6 can exceed a 1e-5 relative
error from rounding alone; ``run_check(..., step=1e-4)`` separates that
from a genuine mismatch.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import RESERVED, SyntheticSpec, Vocabulary, expand, make_batch, synthesize, tokenize
from .errors import ConfigError
from .layers import (Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore,
                     padding_mask)
from .model import FeatureEncoder, MtnTmt
from .sequences import ModalSequence, TokenBatch
from .tensor import Tensor, check_gradients
from .tmt import DENSE, SIMILARITY, ModalTranslator, TmtConfig
from .transformer import DecoderStack, EncoderStack

STEP = 1e-5
# single layers are checked tighter than composed stacks and the full model
LAYER_TOLERANCE = 1e-6
STACK_TOLERANCE = 1e-5

# the width of the check-scale model: the full-size model has ~10^6 coordinates
CHECK_WIDTH, CHECK_HEADS, CHECK_FFN, CHECK_FEATURES = 4, 2, 8, 4


@dataclass
class CheckResult:
    module: str
    max_error: float
    tolerance: float
    coordinates: int
    seconds: float
    step: float = STEP

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _jitter(store: ParamStore, rng: np.random.Generator) -> None:
    """Move every parameter off its structured initial value (zero biases, unit gains)."""
    for p in store.values():
        p.data += 0.1 * rng.standard_normal(p.shape)


def _projection(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.sum_(out * weights)


def _inputs(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _linear(rng):
    store = ParamStore(rng)
    layer = Linear(store, "linear", 5, 3)
    _jitter(store, rng)
    x = _inputs(rng, 2, 4, 5)
    w = _projection(rng, (2, 4, 3))
    return lambda: _weighted(layer(x), w), [*store.values(), x]


def _layer_norm(rng):
    store = ParamStore(rng)
    layer = LayerNorm(store, "norm", 6)
    _jitter(store, rng)
    x = _inputs(rng, 3, 6)
    w = _projection(rng, (3, 6))
    return lambda: _weighted(layer(x), w), [*store.values(), x]


def _embedding(rng):
    store = ParamStore(rng)
    layer = Embedding(store, "embedding", 7, 4)
    ids = rng.integers(0, 7, size=(2, 5))
    w = _projection(rng, (2, 5, 4))
    return lambda: _weighted(layer(ids), w), list(store.values())


def _attention(rng):
    store = ParamStore(rng)
    layer = MultiHeadAttention(store, "attention", 4, 2)
    _jitter(store, rng)
    xq, xkv = _inputs(rng, 2, 3, 4), _inputs(rng, 2, 5, 4)
    mask = padding_mask(np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=bool))
    w = _projection(rng, (2, 3, 4))
    return lambda: _weighted(layer(xq, xkv, mask), w), [*store.values(), xq, xkv]


def _feed_forward(rng):
    store = ParamStore(rng)
    layer = FeedForward(store, "ffn", 4, 6)
    _jitter(store, rng)
    x = _inputs(rng, 2, 3, 4)
    w = _projection(rng, (2, 3, 4))
    return lambda: _weighted(layer(x), w), [*store.values(), x]


def _feature_encoder(rng):
    store = ParamStore(rng)
    layer = FeatureEncoder(store, "features", 3, 4)
    _jitter(store, rng)
    raw = rng.standard_normal((2, 5, 3))
    valid = np.ones((2, 5), dtype=bool)
    w = _projection(rng, (2, 5, 4))
    return lambda: _weighted(layer(raw, valid, "video").values, w), list(store.values())


def _encoder(rng):
    store = ParamStore(rng)
    stack = EncoderStack(store, "encoder", 2, 4, 2, 8)
    _jitter(store, rng)
    x = _inputs(rng, 2, 4, 4)
    valid = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
    w = _projection(rng, (2, 4, 4)) * valid[..., None]
    return lambda: _weighted(stack(ModalSequence(x, valid)).values, w), [*store.values(), x]


def _decoder(rng):
    store = ParamStore(rng)
    stack = DecoderStack(store, "decoder", 2, 4, 2, n_memories=2, ffn_width=8)
    _jitter(store, rng)
    x, m1, m2 = _inputs(rng, 2, 3, 4), _inputs(rng, 2, 4, 4), _inputs(rng, 2, 2, 4)
    valid_x = np.array([[1, 1, 1], [1, 1, 0]], dtype=bool)
    memories = [ModalSequence(m1, np.array([[1, 1, 1, 1], [1, 1, 1, 0]], dtype=bool)),
                ModalSequence(m2, np.array([[1, 1], [0, 0]], dtype=bool))]
    w = _projection(rng, (2, 3, 4)) * valid_x[..., None]
    return (lambda: _weighted(stack(ModalSequence(x, valid_x), memories).values, w),
            [*store.values(), x, m1, m2])


def _translator_text(rng):
    store = ParamStore(rng)
    embedding = Embedding(store, "embedding", 9, 4)
    tmt = ModalTranslator(store, "tmt", TmtConfig(1), 4, 2, 8, embedding=embedding)
    _jitter(store, rng)
    source = _inputs(rng, 2, 3, 4)
    target = TokenBatch.from_lists([[4, 5, 6, 3], [7, 3]])
    valid = np.array([[1, 1, 1], [1, 1, 0]], dtype=bool)
    return lambda: tmt(ModalSequence(source, valid), target).loss, [*store.values(), source]


def _translator_dense(rng):
    store = ParamStore(rng)
    tmt = ModalTranslator(store, "tmt", TmtConfig(1, DENSE, SIMILARITY), 4, 2, 8, target_width=3)
    _jitter(store, rng)
    source, target = _inputs(rng, 2, 3, 4), rng.standard_normal((2, 4, 3))
    valid_s = np.array([[1, 1, 1], [1, 0, 0]], dtype=bool)
    valid_t = np.array([[1, 1, 1, 1], [1, 1, 1, 0]], dtype=bool)
    return (lambda: tmt(ModalSequence(source, valid_s), ModalSequence(Tensor(target), valid_t)).loss,
            [*store.values(), source])


def check_config(config: RunConfig | None = None) -> RunConfig:
    """The check-scale counterpart of ``config``: same structure and loss weights, tiny widths.

    Every depth is 1 and dropout is off.
    """
    config = config or RunConfig()
    return config.replace(d_model=CHECK_WIDTH, heads=CHECK_HEADS, d_ff=CHECK_FFN, vct_depth=1, dst_depth=1,
                          answer_depth=1, qae_depth=1, keep_prob=1.0, video_width=CHECK_FEATURES,
                          audio_width=CHECK_FEATURES)


def model_batch(config: RunConfig, seed: int = 0):
    """A 2-example batch (second turns, so histories are nonempty) plus its vocabulary."""
    spec = SyntheticSpec(dialogs=2, turns=2, actions=4, actions_per_dialog=3, video_length=3,
                         feature_width=CHECK_FEATURES, noise=0.1)
    dialogs, feats, _ = synthesize(spec, seed)
    words = sorted({t for d in dialogs for text in (d.caption, d.summary, *[s for qa in d.turns for s in qa])
                    for t in tokenize(text)})
    vocab = Vocabulary([*RESERVED, *words])

    class _Features:
        def features(self, dialog_id, modality):
            return feats[dialog_id][modality]

    examples = [ex for ex in expand(dialogs) if ex.turn == 1]
    modalities = ("video", "audio") if config.task == "video-text" else ()
    return make_batch(examples, vocab, _Features(), modalities), vocab


def _model(rng, config: RunConfig | None = None, seed: int = 0):
    config = check_config(config).replace(seed=seed)
    batch, vocab = model_batch(config, seed)
    model = MtnTmt(config, len(vocab))
    return lambda: model.forward(batch).total, list(model.store.values())


LAYER_CHECKS: dict[str, tuple[Callable, float]] = {
    "linear": (_linear, LAYER_TOLERANCE),
    "layer_norm": (_layer_norm, LAYER_TOLERANCE),
    "embedding": (_embedding, LAYER_TOLERANCE),
    "attention": (_attention, LAYER_TOLERANCE),
    "feed_forward": (_feed_forward, LAYER_TOLERANCE),
    "feature_encoder": (_feature_encoder, LAYER_TOLERANCE),
    "encoder": (_encoder, STACK_TOLERANCE),
    "decoder": (_decoder, STACK_TOLERANCE),
    "translator_text": (_translator_text, STACK_TOLERANCE),
    "translator_dense": (_translator_dense, STACK_TOLERANCE),
}
MODULES = (*LAYER_CHECKS, "model")


def run_check(module: str, config: RunConfig | None = None, seed: int = 0, step: float = STEP) -> CheckResult:
    if module not in MODULES:
        raise ConfigError(f"unknown grad-check module {module!r}; choose from {', '.join(MODULES)}")
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    if module == "model":
        loss_fn, tensors = _model(rng, config, seed)
        tolerance = STACK_TOLERANCE
    else:
        build, tolerance = LAYER_CHECKS[module]
        loss_fn, tensors = build(rng)
    error = check_gradients(loss_fn, tensors, step)
    return CheckResult(module, error, tolerance, sum(t.size for t in tensors), time.perf_counter() - start, step)


def run_checks(modules=MODULES, config: RunConfig | None = None, seed: int = 0,
               step: float = STEP) -> list[CheckResult]:
    return [run_check(m, config, seed, step) for m in modules]
