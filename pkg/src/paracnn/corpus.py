"""Paragraph preprocessing, synthetic scene corpus, and feature file I/O.

The synthetic corpus is the desk-scale stand-in for a real paragraph
dataset: seeded scenes of colored shapes on a grid, one templated sentence
per object, and region features that deterministically encode each object's
(shape, color, position) so the text is a learnable function of the features.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import RngState

PAD, START, EOS, UNK = "<pad>", "<start>", "<eos>", "<unk>"
SPECIALS = (PAD, START, EOS, UNK)

FEATURE_MAGIC = b"PFV1"

_SENT_SPLIT = re.compile(r"(?<=[.!?])\s+")


class CorpusError(ValueError):
    """Malformed corpus input (empty text, bad manifest, bad encode request)."""


class FeatureFileError(ValueError):
    """Feature file violates the PFV1 format."""


def tokenize(text: str) -> list:
    """Lowercased whitespace tokens with terminal punctuation stripped."""
    out = []
    for tok in text.lower().split():
        tok = tok.strip(".!?")
        if tok:
            out.append(tok)
    return out


def split_sentences(text: str) -> list:
    """Split on '.', '!', '?' followed by whitespace; drop empty pieces."""
    pieces = _SENT_SPLIT.split(text.strip())
    return [p for p in (s.strip() for s in pieces) if p]


@dataclass
class Vocab:
    """Bidirectional token map with specials and a frequency threshold."""

    tokens: list
    min_freq: int = 2
    index: dict = field(init=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise CorpusError(f"vocab must start with the special tokens {SPECIALS}")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise CorpusError("duplicate tokens in vocab")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad(self) -> int:
        return 0

    @property
    def start(self) -> int:
        return 1

    @property
    def eos(self) -> int:
        return 2

    @property
    def unk(self) -> int:
        return 3

    def encode_token(self, tok: str) -> int:
        return self.index.get(tok, self.unk)

    def decode_index(self, idx: int) -> str:
        return self.tokens[idx]


def build_vocab(paragraphs, min_freq: int = 2) -> Vocab:
    """Frequency-thresholded vocabulary, deterministic and order-independent.

    Tokens with corpus frequency below ``min_freq`` are dropped (they encode
    to <unk>); the kept tokens are ordered by descending frequency, ties
    broken lexicographically. On the full-scale visual-paragraph dataset the
    default threshold yields a vocabulary of 8668 words; the synthetic corpus
    stays under 30.
    """
    paragraphs = list(paragraphs)
    if not paragraphs:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    freq = {}
    for p in paragraphs:
        for tok in tokenize(p):
            freq[tok] = freq.get(tok, 0) + 1
    kept = sorted((t for t, c in freq.items() if c >= min_freq),
                  key=lambda t: (-freq[t], t))
    return Vocab(list(SPECIALS) + kept, min_freq=min_freq)


def encode_paragraph(text: str, vocab: Vocab, max_sentences: int = 6,
                     max_words: int = 30):
    """Encode one paragraph into a fixed [M, N] grid.

    Keeps at most M sentences; each sentence keeps at most N-1 words plus a
    trailing <eos>, padded with <pad>. Returns (tokens, mask, sentence_count)
    where the mask covers the words and the <eos>.
    """
    sentences = split_sentences(text)
    if not sentences:
        raise CorpusError(f"no sentences after segmentation: {text!r}")
    sentences = sentences[:max_sentences]
    tokens = np.full((max_sentences, max_words), vocab.pad, dtype=np.int64)
    mask = np.zeros((max_sentences, max_words), dtype=bool)
    count = 0
    for j, sent in enumerate(sentences):
        words = tokenize(sent)[: max_words - 1]
        if not words:
            continue
        ids = [vocab.encode_token(w) for w in words] + [vocab.eos]
        tokens[count, : len(ids)] = ids
        mask[count, : len(ids)] = True
        count += 1
    if count == 0:
        raise CorpusError(f"no tokens after segmentation: {text!r}")
    return tokens[:max_sentences], mask[:max_sentences], count


def decode_tokens(row, vocab: Vocab) -> list:
    """Word tokens of one encoded sentence (strips specials)."""
    out = []
    for idx in row:
        tok = vocab.decode_index(int(idx))
        if tok == EOS:
            break
        if tok not in SPECIALS:
            out.append(tok)
    return out


@dataclass
class ParagraphBatch:
    """Padded token grid [B, M, N] with prefix masks and per-item counts."""

    tokens: np.ndarray
    mask: np.ndarray
    sentence_counts: np.ndarray
    feature_refs: list

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.sentence_counts = np.asarray(self.sentence_counts, dtype=np.int64)
        self.validate()

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    def validate(self):
        if self.tokens.ndim != 3 or self.mask.shape != self.tokens.shape:
            raise CorpusError("batch tokens and mask must share a [B, M, N] shape")
        B, M, N = self.tokens.shape
        if self.sentence_counts.shape != (B,) or len(self.feature_refs) != B:
            raise CorpusError("per-item fields must have length B")
        if (self.sentence_counts < 0).any() or (self.sentence_counts > M).any():
            raise CorpusError("sentence_counts must lie in [0, M]")
        # valid positions must form a prefix of each sentence row
        lengths = self.mask.sum(axis=2)
        prefix = np.arange(N)[None, None, :] < lengths[:, :, None]
        if not (prefix == self.mask).all():
            raise CorpusError("mask rows must be prefix-shaped")
        if (self.tokens[~self.mask] != 0).any():
            raise CorpusError("padded positions must hold <pad>")


# -- synthetic scenes ------------------------------------------------------------

COLORS = ("blue", "green", "orange", "purple", "red", "yellow")
SHAPES = ("circle", "cone", "cube", "ring", "square", "star")
POSITION_NAMES = ("northwest", "north", "northeast",
                  "west", "center", "east",
                  "southwest", "south", "southeast")

SENTENCE_TEMPLATE = "the {color} {shape} is in the {position}."


@dataclass
class SyntheticScene:
    """Objects (shape, color, grid cell) in canonical cell order."""

    objects: list  # list of (shape, color, cell)

    def paragraph(self, grid=(3, 3)) -> str:
        names = position_names(grid)
        return " ".join(SENTENCE_TEMPLATE.format(color=c, shape=s, position=names[cell])
                        for s, c, cell in self.objects)


def position_names(grid) -> list:
    rows, cols = grid
    if (rows, cols) == (3, 3):
        return list(POSITION_NAMES)
    return [f"cell{r}x{c}" for r in range(rows) for c in range(cols)]


def feature_dim(grid=(3, 3), n_shapes: int = len(SHAPES), n_colors: int = len(COLORS)) -> int:
    cells = grid[0] * grid[1]
    return cells + cells * n_shapes + cells * n_colors


def encode_object(shape_idx: int, color_idx: int, cell: int, grid=(3, 3),
                  n_shapes: int = len(SHAPES), n_colors: int = len(COLORS)) -> np.ndarray:
    """Deterministic region feature: position block plus position-tied
    shape and color blocks, so pooled unions keep attribute pairings."""
    cells = grid[0] * grid[1]
    vec = np.zeros(feature_dim(grid, n_shapes, n_colors))
    vec[cell] = 1.0
    vec[cells + cell * n_shapes + shape_idx] = 1.0
    vec[cells + cells * n_shapes + cell * n_colors + color_idx] = 1.0
    return vec


def generate_synthetic_corpus(seed: int, size: int, grid=(3, 3), max_objects: int = 3,
                              noise: float = 0.05):
    """Seeded dataset of (scene, paragraph, region features).

    Scenes hold 2..max_objects objects on distinct cells (canonical order is
    row-major cell index); the paragraph is one templated sentence per object
    and region features carry seeded Gaussian noise of the given amplitude.
    """
    if size < 1:
        raise CorpusError("corpus size must be >= 1")
    cells = grid[0] * grid[1]
    if max_objects > cells:
        raise CorpusError(f"max_objects {max_objects} exceeds {cells} grid cells")
    rng = RngState(seed).child(17)
    records = []
    for i in range(size):
        n = int(rng.integers(2, max_objects + 1))
        chosen = sorted(int(c) for c in rng.choice(np.arange(cells), size=n, replace=False))
        objs = []
        feats = np.zeros((n, feature_dim(grid)))
        for r, cell in enumerate(chosen):
            s = int(rng.integers(0, len(SHAPES)))
            c = int(rng.integers(0, len(COLORS)))
            objs.append((SHAPES[s], COLORS[c], cell))
            feats[r] = encode_object(s, c, cell, grid)
        if noise > 0:
            feats = feats + rng.normal(feats.shape, scale=noise)
        scene = SyntheticScene(objects=objs)
        records.append({"id": f"scene{i:05d}", "scene": scene,
                        "paragraph": scene.paragraph(grid), "features": feats})
    return records


def synthetic_vocab_paragraphs(grid=(3, 3)) -> list:
    """Every template sentence once, repeated so all words clear min_freq=2."""
    names = position_names(grid)
    sents = [SENTENCE_TEMPLATE.format(color=c, shape=s, position=p)
             for c in COLORS for s in SHAPES for p in names]
    return [" ".join(sents)] * 2


# -- feature files -----------------------------------------------------------------

def save_features(path, features: np.ndarray):
    """Write a PFV1 file: magic, u32 region count, u32 dim, f32 row-major data."""
    arr = np.asarray(features, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise FeatureFileError(f"features must be a non-empty [R, d] matrix, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f4").tobytes())


def load_features(path) -> np.ndarray:
    """Read a PFV1 file into a float64 [R, d] matrix."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise FeatureFileError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise FeatureFileError(f"{path}: truncated header")
        rows, dim = struct.unpack("<II", header)
        if rows == 0 or dim == 0:
            raise FeatureFileError(f"{path}: degenerate dimensions R={rows}, d={dim}")
        expected = rows * dim * 4
        payload = fh.read()
        if len(payload) != expected:
            raise FeatureFileError(
                f"{path}: truncated data, expected {expected} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(rows, dim)


# -- manifests ------------------------------------------------------------------------

def write_manifest(path, entries):
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps({"id": e["id"], "feature_path": e["feature_path"],
                                 "paragraph": e["paragraph"]}, sort_keys=True) + "\n")


def read_manifest(path) -> list:
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            for key in ("id", "feature_path", "paragraph"):
                if key not in rec:
                    raise CorpusError(f"{path}:{lineno}: manifest record missing {key!r}")
            entries.append(rec)
    if not entries:
        raise CorpusError(f"{path}: empty manifest")
    return entries


def batch_from_entries(entries, vocab: Vocab, max_sentences: int, max_words: int,
                       base_dir=None) -> ParagraphBatch:
    """Encode manifest entries into one padded batch with loaded features."""
    import os

    toks, masks, counts, feats = [], [], [], []
    for e in entries:
        t, m, c = encode_paragraph(e["paragraph"], vocab, max_sentences, max_words)
        toks.append(t)
        masks.append(m)
        counts.append(c)
        fp = e["feature_path"]
        if base_dir is not None and not os.path.isabs(fp):
            fp = os.path.join(base_dir, fp)
        feats.append(load_features(fp) if isinstance(fp, str) else fp)
    return ParagraphBatch(np.stack(toks), np.stack(masks), np.asarray(counts), feats)


def pad_feature_batch(features: list):
    """Stack variable-region feature matrices into [B, R_max, d] plus a mask."""
    dims = {f.shape[1] for f in features}
    if len(dims) != 1:
        raise FeatureFileError(f"feature dimension mismatch across batch: {sorted(dims)}")
    d = dims.pop()
    rmax = max(f.shape[0] for f in features)
    out = np.zeros((len(features), rmax, d))
    mask = np.zeros((len(features), rmax))
    for i, f in enumerate(features):
        out[i, : f.shape[0]] = f
        mask[i, : f.shape[0]] = 1.0
    return out, mask
