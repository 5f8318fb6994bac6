"""Datasets, vocabulary, batching, the synthetic generator and the TNSR codec.

Dataset directory layout::

    manifest.json          dialog file, feature dir, modality suffixes, widths
    dialogs.jsonl          one dialog per line: id, caption, summary, turns
    features/<id>_<suffix>.tnsr
"""
from __future__ import annotations

import io
import json
import os
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CheckpointError, ConfigError, FormatError, VocabError
from .sequences import TokenBatch

PAD, UNK, SOS, EOS = "<pad>", "<unk>", "<sos>", "<eos>"
PAD_ID, UNK_ID, SOS_ID, EOS_ID = 0, 1, 2, 3
RESERVED = (PAD, UNK, SOS, EOS)

DATA_ROOT_ENV = "MTN_TMT_DATA"

_TOKEN = re.compile(r"\w+|[^\w\s]")


def resolve_path(path) -> Path:
    """Relative paths resolve against ``$MTN_TMT_DATA`` when it is set."""
    path = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not path.is_absolute() and not path.exists():
        return Path(root) / path
    return path


# -- text ----------------------------------------------------------------------

def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise VocabError(f"vocabulary must start with {', '.join(RESERVED)}")
        if len(set(tokens)) != len(tokens):
            raise VocabError("vocabulary has duplicate tokens")
        self.tokens = tokens
        self._index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def lookup(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise VocabError(f"id {idx} outside vocabulary of {len(self.tokens)}")
        return self.tokens[idx]

    def encode(self, text: str, eos: bool = True) -> list[int]:
        ids = [self.lookup(t) for t in tokenize(text)]
        return ids + [EOS_ID] if eos else ids

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            if i == EOS_ID:
                break
            if i in (PAD_ID, SOS_ID):
                continue
            words.append(self.token(int(i)))
        return detokenize(words)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise FormatError(f"cannot read vocabulary {path}: {exc}") from None
        return cls([ln for ln in lines if ln])


def dialog_texts(dialog: "Dialog") -> Iterable[str]:
    yield dialog.caption
    yield dialog.summary
    for q, a in dialog.turns:
        yield q
        yield a


def build_vocab(corpus_paths: Sequence, min_count: int = 1) -> Vocabulary:
    """Tokens with at least ``min_count`` occurrences, by descending count then lexicographic."""
    counts: Counter[str] = Counter()
    for path in corpus_paths:
        for dialog in read_dialogs(path):
            for text in dialog_texts(dialog):
                counts.update(tokenize(text))
    for tok in RESERVED:
        counts.pop(tok, None)
    if not counts:
        raise FormatError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept)


# -- dialogs -------------------------------------------------------------------

@dataclass
class Dialog:
    id: str
    caption: str
    summary: str
    turns: list[tuple[str, str]]

    def to_record(self) -> dict:
        return {"id": self.id, "caption": self.caption, "summary": self.summary,
                "turns": [{"question": q, "answer": a} for q, a in self.turns]}


@dataclass
class DialogExample:
    """One answer to predict: turn ``turn`` of a dialog with all earlier turns as history."""

    dialog_id: str
    turn: int
    history: list[tuple[str, str]]
    question: str
    answer: str
    caption: str
    summary: str

    @property
    def key(self) -> str:
        return f"{self.dialog_id}#{self.turn}"


def _parse_record(line: str, lineno: int, path) -> Dialog:
    try:
        rec = json.loads(line)
        turns = [(str(t["question"]), str(t["answer"])) for t in rec["turns"]]
        return Dialog(str(rec["id"]), str(rec["caption"]), str(rec["summary"]), turns)
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}:{lineno}: malformed dialog record ({exc})") from None


def read_dialogs(path) -> list[Dialog]:
    path = resolve_path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read dialogs {path}: {exc}") from None
    return [_parse_record(line, i, path) for i, line in enumerate(text.splitlines(), 1) if line.strip()]


def write_dialogs(path, dialogs: Sequence[Dialog]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dialogs:
            fh.write(json.dumps(d.to_record(), sort_keys=True) + "\n")


def expand(dialogs: Sequence[Dialog]) -> list[DialogExample]:
    out = []
    for d in dialogs:
        for t, (q, a) in enumerate(d.turns):
            out.append(DialogExample(d.id, t, list(d.turns[:t]), q, a, d.caption, d.summary))
    return out


def load_dialogs(path) -> list[DialogExample]:
    return expand(read_dialogs(path))


# -- TNSR tensor codec ----------------------------------------------------------

MAGIC_F32 = b"TNSR"
MAGIC_F64 = b"TNSD"


def encode_tensor(array: np.ndarray, double: bool = False) -> bytes:
    array = np.asarray(array)
    dtype = "<f8" if double else "<f4"
    header = (MAGIC_F64 if double else MAGIC_F32) + struct.pack("<I", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one TNSR/TNSD block at ``offset``; returns (float64 array, next offset)."""
    if len(buf) - offset < 8:
        raise FormatError("truncated tensor header")
    magic = buf[offset:offset + 4]
    if magic not in (MAGIC_F32, MAGIC_F64):
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    if len(buf) - pos < 4 * rank:
        raise FormatError("truncated tensor extents")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    itemsize = 8 if magic == MAGIC_F64 else 4
    count = 1
    for n in shape:
        count *= n
    nbytes = count * itemsize
    if nbytes > len(buf) - pos:
        raise FormatError(f"tensor extents {shape} overflow the payload")
    data = np.frombuffer(buf, dtype="<f8" if itemsize == 8 else "<f4", count=count, offset=pos)
    return data.astype(np.float64).reshape(shape), pos + nbytes


def write_tensor(path, array: np.ndarray, double: bool = False) -> None:
    Path(path).write_bytes(encode_tensor(array, double))


def read_tensor(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read tensor {path}: {exc}") from None
    array, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return array


def load_features(path) -> np.ndarray:
    array = read_tensor(path)
    if array.ndim != 2:
        raise FormatError(f"{path}: feature tensor must have rank 2, got {array.ndim}")
    if array.shape[0] == 0 or array.shape[1] == 0:
        raise FormatError(f"{path}: feature tensor has an empty extent {array.shape}")
    return array


# -- checkpoints -------------------------------------------------------------------

def checkpoint_bytes(named: Iterable[tuple[str, np.ndarray]]) -> bytes:
    out = io.BytesIO()
    count = 0
    for name, value in named:
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)) + raw)
        out.write(encode_tensor(value, double=True))
        count += 1
    out.write(struct.pack("<I", count))
    return out.getvalue()


def parse_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {}
    pos = 0
    while len(buf) - pos > 4:
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if n > len(buf) - pos:
            raise CheckpointError("truncated parameter name")
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        try:
            entries[name], pos = decode_tensor(buf, pos)
        except FormatError as exc:
            raise CheckpointError(f"parameter {name!r}: {exc}") from None
    if len(buf) - pos != 4:
        raise CheckpointError("checkpoint is missing its trailing entry count")
    (count,) = struct.unpack_from("<I", buf, pos)
    if count != len(entries):
        raise CheckpointError(f"checkpoint declares {count} entries but holds {len(entries)}")
    return entries


def checkpoint_save(store, path) -> None:
    Path(path).write_bytes(checkpoint_bytes((name, p.data) for name, p in store.items()))


def checkpoint_load(store, path) -> None:
    """Copy saved values into ``store``; names and shapes must match exactly."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    entries = parse_checkpoint(buf)
    expected = {name: p.shape for name, p in store.items()}
    problems = [f"missing {n}" for n in expected if n not in entries]
    problems += [f"unexpected {n}" for n in entries if n not in expected]
    problems += [f"shape {n}: {entries[n].shape} != {s}" for n, s in expected.items()
                 if n in entries and entries[n].shape != s]
    if problems:
        raise CheckpointError("checkpoint does not match the model: " + "; ".join(problems))
    for name, p in store.items():
        p.data[...] = entries[name]


# -- datasets ------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    dialogs: str = "dialogs.jsonl"
    features: str = "features"
    suffixes: dict = field(default_factory=lambda: {"video": "video", "audio": "audio"})
    widths: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"dialogs": self.dialogs, "features": self.features,
                           "suffixes": self.suffixes, "widths": self.widths}, indent=2, sort_keys=True)

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        try:
            raw = json.loads(Path(path).read_text())
            return cls(raw["dialogs"], raw["features"], dict(raw["suffixes"]),
                       {k: int(v) for k, v in raw.get("widths", {}).items()})
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"bad dataset manifest {path}: {exc}") from None


class Dataset:
    """Dialog examples plus lazily loaded feature files."""

    def __init__(self, root, manifest: DatasetManifest | None = None):
        self.root = resolve_path(root)
        if manifest is None:
            mpath = self.root / "manifest.json"
            manifest = DatasetManifest.read(mpath) if mpath.exists() else DatasetManifest()
        self.manifest = manifest
        self.dialogs = read_dialogs(self.root / manifest.dialogs)
        self.examples = expand(self.dialogs)
        self._cache: dict[tuple[str, str], np.ndarray] = {}
        self.feature_reads = 0

    def __len__(self) -> int:
        return len(self.examples)

    def feature_path(self, dialog_id: str, modality: str) -> Path:
        suffix = self.manifest.suffixes.get(modality)
        if suffix is None:
            raise FormatError(f"manifest declares no suffix for modality {modality!r}")
        return self.root / self.manifest.features / f"{dialog_id}_{suffix}.tnsr"

    def features(self, dialog_id: str, modality: str) -> np.ndarray:
        key = (dialog_id, modality)
        if key not in self._cache:
            array = load_features(self.feature_path(dialog_id, modality))
            self.feature_reads += 1
            width = self.manifest.widths.get(modality)
            if width and array.shape[1] != width:
                raise FormatError(f"{dialog_id} {modality}: width {array.shape[1]}, manifest declares {width}")
            self._cache[key] = array
        return self._cache[key]

    def width(self, modality: str) -> int:
        if modality in self.manifest.widths:
            return self.manifest.widths[modality]
        if not self.dialogs:
            raise FormatError("cannot infer feature width from an empty dataset")
        return self.features(self.dialogs[0].id, modality).shape[1]

    def check(self) -> None:
        """Every referenced feature file exists and parses."""
        for d in self.dialogs:
            for modality in self.manifest.suffixes:
                self.features(d.id, modality)


def import_features(dialogs_path, npy_dir, out_dir) -> Path:
    """Build a dataset directory from a dialog file and externally extracted features.

    ``npy_dir`` holds one ``<dialog id>_<modality>.npy`` array of shape (T, d_feat) per dialog for
    each of ``video`` and ``audio`` (for instance per-segment I3D and VGGish vectors). Each array is
    rewritten as a TNSR file and the per-modality width goes into the manifest.
    """
    dialogs = read_dialogs(dialogs_path)
    out = Path(out_dir)
    manifest = DatasetManifest()
    (out / manifest.features).mkdir(parents=True, exist_ok=True)
    for d in dialogs:
        for modality, suffix in manifest.suffixes.items():
            src = Path(npy_dir) / f"{d.id}_{suffix}.npy"
            try:
                array = np.load(src, allow_pickle=False)
            except (OSError, ValueError) as exc:
                raise FormatError(f"cannot read {src}: {exc}") from None
            if array.ndim != 2 or array.shape[0] == 0:
                raise FormatError(f"{src}: expected a nonempty (T, d_feat) array, got shape {array.shape}")
            width = manifest.widths.setdefault(modality, array.shape[1])
            if array.shape[1] != width:
                raise FormatError(f"{src}: width {array.shape[1]} differs from {width} seen earlier")
            write_tensor(out / manifest.features / f"{d.id}_{suffix}.tnsr", array)
    write_dialogs(out / manifest.dialogs, dialogs)
    (out / "manifest.json").write_text(manifest.to_json() + "\n")
    return out


# -- batching --------------------------------------------------------------------------

@dataclass
class DialogBatch:
    keys: list[str]
    question: TokenBatch
    answer: TokenBatch
    caption: TokenBatch
    summary: TokenBatch
    history: TokenBatch
    eos_index: np.ndarray
    eos_valid: np.ndarray
    video: np.ndarray | None = None
    video_valid: np.ndarray | None = None
    audio: np.ndarray | None = None
    audio_valid: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.keys)


def history_layout(turns: Sequence[Sequence[int]]) -> tuple[list[int], list[int]]:
    """Concatenate eos-terminated turns; returns (ids, eos positions)."""
    ids: list[int] = []
    eos_at: list[int] = []
    for i, turn in enumerate(turns):
        if not turn or turn[-1] != EOS_ID or EOS_ID in turn[:-1]:
            raise FormatError(f"history turn {i} must contain exactly one eos, at its end")
        ids.extend(turn)
        eos_at.append(len(ids) - 1)
    return ids, eos_at


def _pad_features(arrays: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    length = max(a.shape[0] for a in arrays)
    width = arrays[0].shape[1]
    out = np.zeros((len(arrays), length, width))
    valid = np.zeros((len(arrays), length), dtype=bool)
    for i, a in enumerate(arrays):
        if a.shape[1] != width:
            raise FormatError(f"feature widths differ within a run: {a.shape[1]} vs {width}")
        out[i, :a.shape[0]] = a
        valid[i, :a.shape[0]] = True
    return out, valid


def make_batch(examples: Sequence[DialogExample], vocab: Vocabulary, dataset: Dataset | None = None,
               modalities: Sequence[str] = ()) -> DialogBatch:
    histories = [history_layout([vocab.encode(f"{q} {a}") for q, a in ex.history]) for ex in examples]
    eos_width = max((len(h[1]) for h in histories), default=0)
    eos_index = np.zeros((len(examples), eos_width), dtype=np.int64)
    eos_valid = np.zeros((len(examples), eos_width), dtype=bool)
    for i, (_, pos) in enumerate(histories):
        eos_index[i, :len(pos)] = pos
        eos_valid[i, :len(pos)] = True
    batch = DialogBatch(
        keys=[ex.key for ex in examples],
        question=TokenBatch.from_lists([vocab.encode(ex.question) for ex in examples]),
        answer=TokenBatch.from_lists([vocab.encode(ex.answer) for ex in examples]),
        caption=TokenBatch.from_lists([vocab.encode(ex.caption) for ex in examples]),
        summary=TokenBatch.from_lists([vocab.encode(ex.summary) for ex in examples]),
        history=TokenBatch.from_lists([h[0] for h in histories]),
        eos_index=eos_index,
        eos_valid=eos_valid,
    )
    for modality in modalities:
        if dataset is None:
            raise ConfigError(f"{modality} features requested without a dataset")
        values, valid = _pad_features([dataset.features(ex.dialog_id, modality) for ex in examples])
        setattr(batch, modality, values)
        setattr(batch, f"{modality}_valid", valid)
    return batch


def batch_and_pad(examples: Sequence[DialogExample], batch_size: int, vocab: Vocabulary,
                  dataset: Dataset | None = None, modalities: Sequence[str] = ()) -> list[DialogBatch]:
    """Consecutive chunks of ``batch_size`` examples, each padded to its own maxima."""
    return [make_batch(examples[i:i + batch_size], vocab, dataset, modalities)
            for i in range(0, len(examples), batch_size)]


# -- synthetic data ------------------------------------------------------------------------

ACTION_WORDS = ("walk", "sit", "eat", "drink", "read", "write", "open", "close",
                "laugh", "sneeze", "clean", "cook", "sleep", "wave", "jump", "throw")
ORDINALS = ("one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten")


@dataclass
class SyntheticSpec:
    dialogs: int = 32
    turns: int = 3
    actions: int = 8
    actions_per_dialog: int = 3
    video_length: int = 12
    feature_width: int = 16
    noise: float = 0.1
    audio_fraction: float = 0.5

    def validate(self) -> None:
        if min(self.dialogs, self.turns, self.actions, self.actions_per_dialog, self.video_length) < 1:
            raise ConfigError("synthetic counts must be positive")
        if self.feature_width < self.actions:
            raise ConfigError(f"feature_width {self.feature_width} cannot one-hot {self.actions} actions")
        if self.video_length % self.actions_per_dialog:
            raise ConfigError("video_length must be a multiple of actions_per_dialog")
        if self.actions_per_dialog > len(ORDINALS):
            raise ConfigError(f"at most {len(ORDINALS)} actions per dialog")
        if self.noise < 0 or not 0 <= self.audio_fraction <= 1:
            raise ConfigError("noise must be >= 0 and audio_fraction in [0, 1]")

    @classmethod
    def from_text(cls, text: str) -> "SyntheticSpec":
        known = {f: type(getattr(cls(), f)) for f in cls.__dataclass_fields__}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (p.strip() for p in line.partition("="))
            if not sep or key not in known:
                raise ConfigError(f"synthetic spec line {lineno}: unknown or malformed {line!r}")
            try:
                values[key] = known[key](value)
            except ValueError:
                raise ConfigError(f"synthetic spec line {lineno}: bad value for {key}") from None
        return cls(**values)


def action_words(n: int) -> list[str]:
    return [ACTION_WORDS[i] if i < len(ACTION_WORDS) else f"action{i}" for i in range(n)]


def caption_for(words: Sequence[str]) -> str:
    return "first " + " then ".join(words)


def summary_for(mentioned: Iterable[str]) -> str:
    return "they talk about " + " ".join(sorted(set(mentioned)))


def _turns(rng: np.random.Generator, words: list[str], vocab_words: list[str], n_turns: int):
    """Question/answer turns plus the action words each one mentions."""
    turns, mentioned = [], []
    step = None
    for _ in range(n_turns):
        kind = rng.integers(3)
        if kind == 2 and step is not None and step + 1 < len(words):
            step += 1
            turns.append(("and after that ?", f"then they {words[step]}"))
            mentioned.append(words[step])
        elif kind == 1:
            w = vocab_words[rng.integers(len(vocab_words))]
            turns.append((f"do they {w} ?", "yes they do" if w in words else "no they do not"))
            mentioned.append(w)
            step = None
        else:
            step = int(rng.integers(len(words)))
            turns.append((f"what happens at step {ORDINALS[step]} ?", f"they {words[step]}"))
            mentioned.append(words[step])
    return turns, mentioned


def synthesize(spec: SyntheticSpec, seed: int) -> tuple[list[Dialog], dict[str, dict[str, np.ndarray]], list[list[int]]]:
    """Dialogs, per-dialog features (float32-exact) and the drawn action ids."""
    spec.validate()
    rng = np.random.default_rng(seed)
    vocab_words = action_words(spec.actions)
    audible = set(range(0, spec.actions, max(1, round(1 / spec.audio_fraction)))) if spec.audio_fraction else set()
    block = spec.video_length // spec.actions_per_dialog
    dialogs, feats, drawn = [], {}, []
    for i in range(spec.dialogs):
        acts = [int(a) for a in rng.integers(spec.actions, size=spec.actions_per_dialog)]
        words = [vocab_words[a] for a in acts]
        video = np.zeros((spec.video_length, spec.feature_width))
        audio = np.zeros((spec.video_length, spec.feature_width))
        for j, a in enumerate(acts):
            video[j * block:(j + 1) * block, a] = 1.0
            if a in audible:
                audio[j * block:(j + 1) * block, a] = 1.0
        video += spec.noise * rng.standard_normal(video.shape)
        audio += spec.noise * rng.standard_normal(audio.shape)
        turns, mentioned = _turns(rng, words, vocab_words, spec.turns)
        dialog_id = f"syn{seed}_{i:05d}"
        dialogs.append(Dialog(dialog_id, caption_for(words), summary_for(mentioned), turns))
        feats[dialog_id] = {"video": video.astype(np.float32).astype(np.float64),
                            "audio": audio.astype(np.float32).astype(np.float64)}
        drawn.append(acts)
    return dialogs, feats, drawn


def generate_synthetic(spec: SyntheticSpec, seed: int, out_dir) -> Path:
    dialogs, feats, _ = synthesize(spec, seed)
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(widths={"video": spec.feature_width, "audio": spec.feature_width})
    write_dialogs(out / manifest.dialogs, dialogs)
    for dialog_id, by_modality in feats.items():
        for modality, array in by_modality.items():
            write_tensor(out / manifest.features / f"{dialog_id}_{manifest.suffixes[modality]}.tnsr", array)
    (out / "manifest.json").write_text(manifest.to_json() + "\n")
    return out


def decode_actions(video: np.ndarray, actions_per_dialog: int, actions: int) -> list[int]:
    """Nearest one-hot decoding of each video block (the Bayes rule under Gaussian noise)."""
    blocks = np.split(video, actions_per_dialog, axis=0)
    return [int(b.mean(axis=0)[:actions].argmax()) for b in blocks]
