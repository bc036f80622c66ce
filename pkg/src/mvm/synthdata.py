"""Synthetic homophene benchmark.

Words are fixed-length phoneme strings.  A surjective phoneme-to-viseme map
makes some words homophenes: distinct phoneme strings with identical viseme
strings.  A sample spreads each symbol over ``frames // word_length``
frames.  The visual token alphabet is the visemes ``0..V-1`` followed by
one phoneme-revealing sub-token ``V + p`` per phoneme ``p``:

* with probability ``emission_separation * profile[word, position]`` a
  frame shows the true phoneme's sub-token (the residual visual cue; the
  per-word position profile makes *where* cues appear word-specific);
* otherwise, with probability ``noise_sigma``, it shows the sub-token of a
  uniformly drawn phoneme of the same viseme class, which says nothing
  about which class member was spoken.

The audio side is the clean phoneme string, each frame replaced by a
uniformly random phoneme with probability ``noise_sigma``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import DataConfig
from .errors import FormatError, LexiconError

MAGIC = b"MVMD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIddQ")

# per-word position weights for the cue probability are drawn from this range, then renormalised to mean 1
PROFILE_RANGE = (0.25, 1.75)


@dataclass
class Lexicon:
    phoneme_to_viseme: np.ndarray  # (P,)
    words: np.ndarray  # (K, L) phoneme ids
    homophene_pairs: list[tuple[int, int]]
    reveal_profile: np.ndarray  # (K, L), mean 1 per word
    emission_separation: float
    noise_sigma: float
    n_visemes: int
    seed: int = 0

    @property
    def n_phonemes(self) -> int:
        return int(self.phoneme_to_viseme.size)

    @property
    def n_words(self) -> int:
        return int(self.words.shape[0])

    @property
    def word_length(self) -> int:
        return int(self.words.shape[1])

    def viseme_string(self, word: int) -> tuple[int, ...]:
        return tuple(int(v) for v in self.phoneme_to_viseme[self.words[word]])

    def viseme_groups(self) -> list[list[int]]:
        """Word indices grouped by identical viseme strings (groups of size >= 2)."""
        groups: dict[tuple[int, ...], list[int]] = {}
        for w in range(self.n_words):
            groups.setdefault(self.viseme_string(w), []).append(w)
        return [g for g in groups.values() if len(g) > 1]

    def homophene_words(self) -> set[int]:
        return {w for pair in self.homophene_pairs for w in pair}

    def __eq__(self, other) -> bool:
        if not isinstance(other, Lexicon):
            return NotImplemented
        return (
            np.array_equal(self.phoneme_to_viseme, other.phoneme_to_viseme)
            and np.array_equal(self.words, other.words)
            and [tuple(p) for p in self.homophene_pairs] == [tuple(p) for p in other.homophene_pairs]
            and np.array_equal(self.reveal_profile, other.reveal_profile)
            and self.emission_separation == other.emission_separation
            and self.noise_sigma == other.noise_sigma
            and self.n_visemes == other.n_visemes
            and self.seed == other.seed
        )


@dataclass
class SyntheticExample:
    viseme_tokens: np.ndarray
    phoneme_tokens: np.ndarray
    label: int


@dataclass
class SyntheticBatch:
    """Examples stacked into arrays: tokens are (n, T), labels (n,)."""

    visual: np.ndarray
    phonemes: np.ndarray
    labels: np.ndarray
    frames: int = field(default=0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        width = self.frames if len(self.labels) == 0 else -1
        self.visual = np.asarray(self.visual, dtype=np.int64).reshape(len(self.labels), width)
        self.phonemes = np.asarray(self.phonemes, dtype=np.int64).reshape(len(self.labels), width)
        if self.visual.shape != self.phonemes.shape:
            raise ValueError(f"visual {self.visual.shape} and phoneme {self.phonemes.shape} tokens differ in shape")
        if len(self.labels):
            self.frames = self.visual.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "SyntheticBatch":
        return SyntheticBatch(self.visual[index], self.phonemes[index], self.labels[index], self.frames)

    def examples(self) -> list[SyntheticExample]:
        return [SyntheticExample(v, p, int(y)) for v, p, y in zip(self.visual, self.phonemes, self.labels)]

    @classmethod
    def from_examples(cls, examples: Sequence[SyntheticExample], frames: int = 0) -> "SyntheticBatch":
        if not examples:
            empty = np.zeros((0, frames), dtype=np.int64)
            return cls(empty, empty.copy(), np.zeros(0, dtype=np.int64), frames)
        return cls(
            np.stack([e.viseme_tokens for e in examples]),
            np.stack([e.phoneme_tokens for e in examples]),
            np.array([e.label for e in examples]),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, SyntheticBatch):
            return NotImplemented
        return (
            self.frames == other.frames
            and np.array_equal(self.visual, other.visual)
            and np.array_equal(self.phonemes, other.phonemes)
            and np.array_equal(self.labels, other.labels)
        )


# ---------------------------------------------------------------------------
# lexicon construction
# ---------------------------------------------------------------------------


def build_lexicon(cfg: DataConfig) -> Lexicon:
    """Build a lexicon with exactly ``cfg.homophene_pairs`` homophene pairs.

    Each pair shares a viseme string and differs in one phoneme at one
    ambiguous position; every other word has a viseme string of its own.
    """
    n_p, n_v, k, length, pairs = cfg.n_phonemes, cfg.n_visemes, cfg.n_words, cfg.word_length, cfg.homophene_pairs
    if not n_p > n_v >= 2:
        raise LexiconError(f"need n_phonemes > n_visemes >= 2, got {n_p} and {n_v}")
    if length < 1 or pairs < 0 or 2 * pairs > k:
        raise LexiconError(f"cannot place {pairs} homophene pairs among {k} words of length {length}")
    if k > n_p ** length:
        raise LexiconError(f"{k} unique words need more than {n_p}^{length} phoneme strings")
    if k - pairs > n_v ** length:
        raise LexiconError(
            f"{k - pairs} distinct viseme strings are needed but only {n_v}^{length} exist"
        )
    if not 0.0 <= cfg.emission_separation <= 1.0 or not 0.0 <= cfg.noise_sigma <= 1.0:
        raise LexiconError("emission_separation and noise_sigma must lie in [0, 1]")

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n_p)
    p2v = np.empty(n_p, dtype=np.int64)
    p2v[order[:n_v]] = np.arange(n_v)
    p2v[order[n_v:]] = rng.integers(0, n_v, size=n_p - n_v)
    classes = [np.flatnonzero(p2v == v) for v in range(n_v)]
    ambiguous = [v for v in range(n_v) if classes[v].size >= 2]

    used: set[tuple[int, ...]] = set()
    words: list[np.ndarray] = []
    homophenes: list[tuple[int, int]] = []
    budget = 10_000 + 100 * k

    def fresh_visemes(force_ambiguous: bool):
        nonlocal budget
        while budget > 0:
            budget -= 1
            vis = rng.integers(0, n_v, size=length)
            pos = -1
            if force_ambiguous:
                pos = int(rng.integers(length))
                vis[pos] = ambiguous[int(rng.integers(len(ambiguous)))]
            if tuple(vis) not in used:
                used.add(tuple(vis))
                return vis, pos
        raise LexiconError("could not find enough distinct viseme strings; relax the lexicon settings")

    def realise(vis):
        return np.array([classes[v][rng.integers(classes[v].size)] for v in vis])

    for _ in range(pairs):
        vis, pos = fresh_visemes(True)
        first = realise(vis)
        second = first.copy()
        options = classes[vis[pos]][classes[vis[pos]] != first[pos]]
        second[pos] = options[rng.integers(options.size)]
        homophenes.append((len(words), len(words) + 1))
        words.extend([first, second])
    while len(words) < k:
        vis, _ = fresh_visemes(False)
        words.append(realise(vis))

    # shuffle word order so homophene members are not adjacent indices
    perm = rng.permutation(k)
    inverse = np.argsort(perm)
    words_arr = np.stack(words)[perm]
    pairs_out = sorted(tuple(sorted((int(inverse[a]), int(inverse[b])))) for a, b in homophenes)

    lo, hi = PROFILE_RANGE
    profile = rng.uniform(lo, hi, size=(k, length))
    profile /= profile.mean(axis=1, keepdims=True)

    return Lexicon(
        phoneme_to_viseme=p2v,
        words=words_arr,
        homophene_pairs=pairs_out,
        reveal_profile=profile,
        emission_separation=float(cfg.emission_separation),
        noise_sigma=float(cfg.noise_sigma),
        n_visemes=n_v,
        seed=int(cfg.seed),
    )


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _class_tables(lexicon: Lexicon) -> tuple[np.ndarray, np.ndarray]:
    """For each phoneme: members of its viseme class (padded) and the class size."""
    p2v = lexicon.phoneme_to_viseme
    classes = [np.flatnonzero(p2v == v) for v in range(lexicon.n_visemes)]
    width = max(c.size for c in classes)
    members = np.zeros((lexicon.n_phonemes, width), dtype=np.int64)
    sizes = np.zeros(lexicon.n_phonemes, dtype=np.int64)
    for p in range(lexicon.n_phonemes):
        c = classes[p2v[p]]
        members[p, : c.size] = c
        sizes[p] = c.size
    return members, sizes


def sample_batch(lexicon: Lexicon, labels, frames: int, rng: np.random.Generator) -> SyntheticBatch:
    labels = np.asarray(labels, dtype=np.int64)
    length = lexicon.word_length
    if frames % length:
        raise ValueError(f"frames ({frames}) must be divisible by the word length ({length})")
    if labels.size and (labels.min() < 0 or labels.max() >= lexicon.n_words):
        raise ValueError("word index out of range")
    n = labels.size
    rep = frames // length
    position = np.arange(frames) // rep
    clean = np.repeat(lexicon.words[labels], rep, axis=1).reshape(n, frames)
    visual = lexicon.phoneme_to_viseme[clean]

    cue_p = np.minimum(1.0, lexicon.emission_separation * lexicon.reveal_profile[labels][:, position])
    u = rng.random((n, frames))
    reveal = u < cue_p
    confuse = ~reveal & (u < cue_p + lexicon.noise_sigma)
    members, sizes = _class_tables(lexicon)
    pick = np.floor(rng.random((n, frames)) * sizes[clean]).astype(np.int64)
    lookalike = members[clean, pick]

    visual = np.where(reveal, lexicon.n_visemes + clean, visual)
    visual = np.where(confuse, lexicon.n_visemes + lookalike, visual)

    audio = clean.copy()
    swap = rng.random((n, frames)) < lexicon.noise_sigma
    audio[swap] = rng.integers(0, lexicon.n_phonemes, size=int(swap.sum()))
    return SyntheticBatch(visual.reshape(n, frames), audio.reshape(n, frames), labels, frames)


def visual_log_likelihood(lexicon: Lexicon, visual: np.ndarray) -> np.ndarray:
    """Exact ``log p(visual tokens | word)`` for every word, shape (n, K).

    Frames are independent given the word, so this is a sum of per-frame
    terms.  Its argmax is the Bayes-optimal visual-only classifier under a
    uniform word prior, which bounds what any lip-only model can reach.
    """
    visual = np.atleast_2d(np.asarray(visual, dtype=np.int64))
    n, frames = visual.shape
    length = lexicon.word_length
    if frames % length:
        raise ValueError(f"frames ({frames}) must be divisible by the word length ({length})")
    rep = frames // length
    position = np.arange(frames) // rep
    _, sizes = _class_tables(lexicon)
    v, sigma = lexicon.n_visemes, lexicon.noise_sigma
    out = np.zeros((n, lexicon.n_words))
    for w in range(lexicon.n_words):
        clean = lexicon.words[w][position]  # (T,)
        cue = np.minimum(1.0, lexicon.emission_separation * lexicon.reveal_profile[w][position])
        is_sub = visual >= v
        shown = np.where(is_sub, visual - v, 0)
        same_class = lexicon.phoneme_to_viseme[shown] == lexicon.phoneme_to_viseme[clean]
        p_sub = np.where(shown == clean, cue, 0.0) + np.where(same_class, sigma / sizes[clean], 0.0)
        p_vis = np.where(visual == lexicon.phoneme_to_viseme[clean], np.maximum(1.0 - cue - sigma, 0.0), 0.0)
        with np.errstate(divide="ignore"):
            out[:, w] = np.log(np.where(is_sub, p_sub, p_vis)).sum(axis=1)
    return out


def sample_example(lexicon: Lexicon, word_index: int, frames: int, rng: np.random.Generator) -> SyntheticExample:
    batch = sample_batch(lexicon, [word_index], frames, rng)
    return SyntheticExample(batch.visual[0], batch.phonemes[0], int(batch.labels[0]))


def make_split(lexicon: Lexicon, per_word: int, frames: int, rng: np.random.Generator) -> SyntheticBatch:
    """A balanced, shuffled split with ``per_word`` samples of every word."""
    labels = rng.permutation(np.repeat(np.arange(lexicon.n_words), per_word))
    return sample_batch(lexicon, labels, frames, rng)


def generate(cfg: DataConfig) -> tuple[Lexicon, SyntheticBatch, SyntheticBatch]:
    """Lexicon plus train and test splits, all determined by ``cfg.seed``."""
    lexicon = build_lexicon(cfg)
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    train = make_split(lexicon, cfg.train_per_word, cfg.frames, train_rng)
    test = make_split(lexicon, cfg.test_per_word, cfg.frames, test_rng)
    return lexicon, train, test


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def header_dict(lexicon: Lexicon, frames: int) -> dict:
    return {
        "magic": MAGIC.decode(),
        "version": FORMAT_VERSION,
        "n_phonemes": lexicon.n_phonemes,
        "n_visemes": lexicon.n_visemes,
        "n_words": lexicon.n_words,
        "word_length": lexicon.word_length,
        "frames": frames,
        "emission_separation": lexicon.emission_separation,
        "noise_sigma": lexicon.noise_sigma,
        "seed": lexicon.seed,
    }


def encode_dataset(lexicon: Lexicon, examples: SyntheticBatch | Sequence[SyntheticExample], frames: int | None = None) -> bytes:
    batch = examples if isinstance(examples, SyntheticBatch) else SyntheticBatch.from_examples(examples, frames or 0)
    frames = batch.frames if frames is None else frames
    parts = [
        _HEADER.pack(
            MAGIC, FORMAT_VERSION, lexicon.n_phonemes, lexicon.n_visemes, lexicon.n_words,
            lexicon.word_length, frames, lexicon.emission_separation, lexicon.noise_sigma, lexicon.seed,
        ),
        lexicon.phoneme_to_viseme.astype("<u2").tobytes(),
        lexicon.words.astype("<u2").tobytes(),
        lexicon.reveal_profile.astype("<f8").tobytes(),
        struct.pack("<I", len(lexicon.homophene_pairs)),
        np.asarray(lexicon.homophene_pairs, dtype="<u4").reshape(-1).tobytes(),
        struct.pack("<I", len(batch)),
    ]
    for v, p, y in zip(batch.visual, batch.phonemes, batch.labels):
        parts.append(struct.pack("<I", v.size))
        parts.append(v.astype("<u2").tobytes())
        parts.append(p.astype("<u2").tobytes())
        parts.append(struct.pack("<I", int(y)))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("dataset file is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        item = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(item * count), dtype=dtype).astype(np.float64 if dtype[1] == "f" else np.int64)


def decode_dataset(buf: bytes) -> tuple[Lexicon, SyntheticBatch]:
    if len(buf) < _HEADER.size + 4:
        raise FormatError("dataset file is truncated")
    if buf[:4] != MAGIC:
        raise FormatError(f"not a dataset file (magic {buf[:4]!r})")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("dataset checksum mismatch")
    r = _Reader(body)
    magic, version, n_p, n_v, k, length, frames, eps, sigma, seed = _HEADER.unpack(r.take(_HEADER.size))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset format version {version}")
    p2v = r.array("<u2", n_p)
    words = r.array("<u2", k * length).reshape(k, length)
    profile = r.array("<f8", k * length).reshape(k, length)
    n_pairs = r.u32()
    pairs = r.array("<u4", 2 * n_pairs).reshape(n_pairs, 2)
    lexicon = Lexicon(
        phoneme_to_viseme=p2v,
        words=words,
        homophene_pairs=[(int(a), int(b)) for a, b in pairs],
        reveal_profile=profile,
        emission_separation=eps,
        noise_sigma=sigma,
        n_visemes=n_v,
        seed=seed,
    )
    count = r.u32()
    examples = []
    for _ in range(count):
        t = r.u32()
        v = r.array("<u2", t)
        p = r.array("<u2", t)
        examples.append(SyntheticExample(v, p, r.u32()))
    if r.pos != len(body):
        raise FormatError("trailing bytes after the last record")
    return lexicon, SyntheticBatch.from_examples(examples, frames)


def write_dataset(path: str | Path, lexicon: Lexicon, examples, frames: int | None = None) -> None:
    """Write the binary dataset plus a JSON sidecar mirroring its header."""
    path = Path(path)
    data = encode_dataset(lexicon, examples, frames)
    path.write_bytes(data)
    batch_frames = struct.unpack_from("<I", data, 24)[0]
    sidecar = header_dict(lexicon, batch_frames)
    sidecar["records"] = len(examples)
    sidecar["homophene_pairs"] = [list(p) for p in lexicon.homophene_pairs]
    path.with_name(path.name + ".json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")


def read_dataset(path: str | Path) -> tuple[Lexicon, SyntheticBatch]:
    return decode_dataset(Path(path).read_bytes())
