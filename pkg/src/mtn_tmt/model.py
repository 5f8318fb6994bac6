"""MTN-TMT: multimodal transformer dialog model with two modal translators."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import VIDEO_TEXT, RunConfig
from .data import EOS_ID, SOS_ID, DialogBatch
from .errors import ConfigError, ContractError
from .layers import Embedding, LayerNorm, Linear, ParamStore, positional_encoding
from .sequences import ModalSequence, TokenBatch
from .tensor import Tensor
from .tmt import ModalTranslator, TmtConfig, encode_tokens, token_nll
from .transformer import EVAL, DecoderStack, Dropout, EncoderStack


def total_loss(l_ans, l_cap, l_sum, alpha: float, beta: float):
    """L = L(Ans) + alpha * L(C) + beta * L(S); works on floats and Tensors alike."""
    if alpha < 0 or beta < 0:
        raise ConfigError(f"loss weights must be non-negative, got alpha={alpha}, beta={beta}")
    return l_ans + alpha * l_cap + beta * l_sum


@dataclass
class ModelOutput:
    logits: Tensor
    answer_loss: Tensor
    caption_loss: Tensor
    summary_loss: Tensor
    total: Tensor
    answer_rows: Tensor
    diagnostics: dict = field(default_factory=dict)


@dataclass
class Generation:
    tokens: list[int]
    truncated: bool
    score: float


class FeatureEncoder:
    """Projection of raw feature vectors to model width: linear, relu, layer norm, positions."""

    def __init__(self, store: ParamStore, name: str, feature_width: int, width: int):
        if feature_width < 1:
            raise ConfigError("feature width must be >= 1")
        self.feature_width = feature_width
        self.width = width
        self.proj = Linear(store, f"{name}.proj", feature_width, width)
        self.norm = LayerNorm(store, f"{name}.norm", width)

    def __call__(self, raw: np.ndarray, valid: np.ndarray, modality: str) -> ModalSequence:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[-1] != self.feature_width:
            raise ConfigError(f"{modality} features have width {raw.shape[-1]}, model expects {self.feature_width}")
        x = self.norm(T.relu(self.proj(Tensor(raw))))
        x = x + positional_encoding(raw.shape[1], self.width)[None]
        return ModalSequence(x, valid, modality)


class MtnTmt:
    BRANCHES = ("question", "history", "caption", "summary", "answer", "dst", "video", "audio", "qae", "vct")

    def __init__(self, config: RunConfig, vocab_size: int, video_width: int | None = None,
                 audio_width: int | None = None):
        self.config = config
        self.vocab_size = vocab_size
        d, h, ff = config.d_model, config.heads, config.ffn_width
        store = self.store = ParamStore(np.random.default_rng(config.seed))
        self.embedding = Embedding(store, "embedding", vocab_size, d, config.scale_embeddings)
        self.history_encoder = EncoderStack(store, "history_encoder", config.dst_depth, d, h, ff)
        self.dst = (ModalTranslator(store, "dialog_summary", TmtConfig(config.dst_depth), d, h, ff,
                                    embedding=self.embedding)
                    if config.dst_enabled else None)
        self.video_text = config.task == VIDEO_TEXT
        self.vct = None
        if self.video_text:
            video_width = video_width or config.video_width
            audio_width = audio_width or config.audio_width
            if not video_width or not audio_width:
                raise ConfigError("video-text mode needs video_width and audio_width")
            self.video_encoder = FeatureEncoder(store, "video_features", video_width, d)
            self.audio_encoder = FeatureEncoder(store, "audio_features", audio_width, d)
            self.query_autoencoder = DecoderStack(store, "query_autoencoder", config.qae_depth, d, h,
                                                  1, ff, causal=False)
            if config.vct_enabled:
                self.vct = ModalTranslator(store, "video_caption", TmtConfig(config.vct_depth), d, h, ff,
                                           embedding=self.embedding)
        self.streams = config.streams
        self.answer_decoder = DecoderStack(store, "answer_decoder", config.answer_depth, d, h,
                                           len(self.streams), ff)

    @property
    def modalities(self) -> tuple[str, ...]:
        return ("video", "audio") if self.video_text else ()

    def translation_head_params(self) -> list[Tensor]:
        """Parameters reached only through the translation losses (decoder halves)."""
        names = [n for n in ("dialog_summary.decoder", "video_caption.decoder") if any(
            k.startswith(n + ".") for k in self.store)]
        return [p for n in names for p in self.store.under(n)]

    # -- dropout streams --------------------------------------------------------------

    def dropouts(self, training: bool, seed=None) -> dict[str, Dropout]:
        """One independent dropout stream per branch so branches never shift each other's masks.

        ``seed`` is an int or a sequence of ints (e.g. run seed and step).
        """
        if not training:
            return {b: EVAL for b in self.BRANCHES}
        base = [self.config.seed] if seed is None else list(np.atleast_1d(seed).tolist())
        return {b: Dropout(self.config.keep_prob, True,
                           np.random.default_rng([*base, zlib.crc32(b.encode())]))
                for b in self.BRANCHES}

    # -- components ------------------------------------------------------------------------

    def encode_text(self, tokens: TokenBatch, drop: Dropout = EVAL) -> ModalSequence:
        return encode_tokens(self.embedding, tokens, drop, self.config.positional)

    def encode_history(self, batch: DialogBatch, drop: Dropout = EVAL) -> ModalSequence:
        """Token-level encoding of the whole history, pooled at each turn's eos."""
        b = batch.size
        if batch.history.length == 0 or batch.eos_index.shape[1] == 0:
            return ModalSequence(Tensor(np.zeros((b, 0, self.config.d_model))), np.zeros((b, 0), dtype=bool))
        encoded = self.history_encoder(self.encode_text(batch.history, drop), drop)
        pooled = T.take_rows(encoded.values, batch.eos_index)
        return ModalSequence(pooled, batch.eos_valid.copy(), "dialog")

    def memories(self, batch: DialogBatch, drops: dict[str, Dropout], translate: bool = True):
        """Ordered answer-decoder memories plus the two translation losses."""
        zero = Tensor(0.0)
        l_cap, l_sum = zero, zero
        diag = {}
        question = self.encode_text(batch.question, drops["question"])
        mem = {
            "question": question,
            "caption": self.encode_text(batch.caption, drops["caption"]),
            "summary": self.encode_text(batch.summary, drops["summary"]),
        }
        dialog = self.encode_history(batch, drops["history"])
        if self.dst is not None and dialog.length:
            if translate:
                out = self.dst(dialog, batch.summary, drops["dst"])
                l_sum = out.loss
                diag["summary_logits"] = out.translation
                diag["summary_included"] = out.included
                enhanced = out.enhanced_source
            else:
                enhanced = self.dst.encoder(dialog, drops["dst"])
            dialog = ModalSequence(enhanced.values, dialog.valid, "dialog")
        mem["dialog"] = dialog
        if self.video_text:
            if batch.video is None or batch.audio is None:
                raise ContractError("video-text mode needs video and audio features in the batch")
            video = self.video_encoder(batch.video, batch.video_valid, "video")
            video = ModalSequence(drops["video"](video.values), video.valid, "video")
            audio = self.audio_encoder(batch.audio, batch.audio_valid, "audio")
            audio = ModalSequence(drops["audio"](audio.values), audio.valid, "audio")
            attended = self.query_autoencoder(question, audio, drops["qae"])
            mem["audio"] = ModalSequence(attended.values, question.valid, "audio")
            if self.vct is not None:
                if translate:
                    out = self.vct(video, batch.caption, drops["vct"])
                    l_cap = out.loss
                    diag["caption_logits"] = out.translation
                    enhanced = out.enhanced_source
                else:
                    enhanced = self.vct.encoder(video, drops["vct"])
                video = ModalSequence(enhanced.values, video.valid, "video")
            mem["video"] = video
        return [mem[s] for s in self.streams], l_cap, l_sum, diag

    def answer_logits(self, answer_in: TokenBatch, memories, drop: Dropout = EVAL) -> Tensor:
        hidden = self.answer_decoder(self.encode_text(answer_in, drop), memories, drop)
        return T.matmul(hidden.values, T.transpose(self.embedding.table))

    # -- training objective ----------------------------------------------------------------

    def forward(self, batch: DialogBatch, alpha: float | None = None, beta: float | None = None,
                training: bool = False, seed=None, translate: bool = True) -> ModelOutput:
        alpha = self.config.alpha if alpha is None else alpha
        beta = self.config.beta if beta is None else beta
        drops = self.dropouts(training, seed)
        memories, l_cap, l_sum, diag = self.memories(batch, drops, translate)
        logits = self.answer_logits(batch.answer.shift_right(SOS_ID), memories, drops["answer"])
        rows = token_nll(logits, batch.answer.ids, batch.answer.valid)
        l_ans = T.mean(rows)
        return ModelOutput(logits, l_ans, l_cap, l_sum, total_loss(l_ans, l_cap, l_sum, alpha, beta), rows, diag)

    # -- generation -------------------------------------------------------------------

    def _step_logprobs(self, memories, prefixes: list[list[int]]) -> np.ndarray:
        ids = np.array([[SOS_ID] + p for p in prefixes], dtype=np.int64)
        tokens = TokenBatch(ids, np.ones(ids.shape, dtype=bool))
        if len(prefixes) > 1:
            memories = [None if m is None else ModalSequence(
                Tensor(np.repeat(m.values.data, len(prefixes), axis=0)),
                np.repeat(m.valid, len(prefixes), axis=0), m.modality) for m in memories]
        logits = self.answer_logits(tokens, memories)
        return T.log_softmax(Tensor(logits.data[:, -1])).data

    def generate(self, batch: DialogBatch, mode: str = "greedy", beam_width: int = 1,
                 max_len: int | None = None) -> list[Generation]:
        """Autoregressive answers for every example of ``batch`` (dropout off)."""
        max_len = self.config.max_answer_len if max_len is None else max_len
        if max_len < 1:
            raise ContractError("max_len must be >= 1")
        if mode not in ("greedy", "beam"):
            raise ConfigError(f"unknown decoding mode {mode!r}")
        results = []
        for i in range(batch.size):
            single = slice_batch(batch, i)
            memories, _, _, _ = self.memories(single, self.dropouts(False), translate=False)
            step = lambda prefixes: self._step_logprobs(memories, prefixes)  # noqa: E731
            if mode == "greedy":
                results.append(greedy_search(step, max_len))
            else:
                results.append(beam_search(step, beam_width, max_len))
        return results


def greedy_search(step, max_len: int) -> Generation:
    tokens: list[int] = []
    score = 0.0
    for _ in range(max_len):
        lp = step([tokens])[0]
        tok = int(np.argmax(lp))
        tokens.append(tok)
        score += float(lp[tok])
        if tok == EOS_ID:
            return Generation(tokens, False, score / len(tokens))
    return Generation(tokens, True, score / len(tokens))


def beam_search(step, beam_width: int, max_len: int) -> Generation:
    """Beam search ranked by length-normalised log-probability (sum / length)."""
    if beam_width < 1:
        raise ConfigError("beam width must be >= 1")
    beams: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for _ in range(max_len):
        lps = step([b[0] for b in beams])
        candidates = []
        for (toks, score), lp in zip(beams, lps):
            for tok in np.argsort(-lp, kind="stable")[:beam_width]:
                candidates.append((toks + [int(tok)], score + float(lp[tok])))
        candidates.sort(key=lambda c: -c[1] / len(c[0]))
        beams = []
        for toks, score in candidates[:beam_width]:
            (finished if toks[-1] == EOS_ID else beams).append((toks, score))
        if not beams or len(finished) >= beam_width:
            break
    pool, truncated = (finished, False) if finished else (beams, True)
    best = max(pool, key=lambda c: c[1] / len(c[0]))
    return Generation(best[0], truncated, best[1] / len(best[0]))


def slice_batch(batch: DialogBatch, i: int) -> DialogBatch:
    """Example ``i`` of a padded batch as its own unpadded batch."""
    def tok(tb: TokenBatch) -> TokenBatch:
        n = int(tb.valid[i].sum())
        return TokenBatch(tb.ids[i:i + 1, :n], tb.valid[i:i + 1, :n])

    def feat(values, valid):
        if values is None:
            return None, None
        n = int(valid[i].sum())
        return values[i:i + 1, :n], valid[i:i + 1, :n]

    n_eos = int(batch.eos_valid[i].sum())
    video, video_valid = feat(batch.video, batch.video_valid)
    audio, audio_valid = feat(batch.audio, batch.audio_valid)
    return DialogBatch([batch.keys[i]], tok(batch.question), tok(batch.answer), tok(batch.caption),
                       tok(batch.summary), tok(batch.history), batch.eos_index[i:i + 1, :n_eos],
                       batch.eos_valid[i:i + 1, :n_eos], video, video_valid, audio, audio_valid)
