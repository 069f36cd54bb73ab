"""Sequential inference: greedy decoding with optional repetition penalties.

Decoding is deterministic: per sentence, the context pools the previously
*generated* sentence, the topic stack is extended by one slot, and words are
picked by argmax until <eos> or the word budget. The repetition penalty
subtracts gamma times a token's emission count from its logit, and trigram
blocking forbids completing any already-emitted trigram; both apply at
inference only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Vocab
from .model import ParagraphModel, SentenceCountPredictor, TopicState, predict_sentence_count
from .tensor import Tensor

NEG_INF = float("-inf")


@dataclass
class DecodeConfig:
    num_sentences: int = 6
    adaptive: bool = False
    min_sentences: int = 1
    max_sentences: int = 6
    max_words: int = None
    rep_penalty: float = 2.0
    block_trigrams: bool = True
    penalty_scope: str = "paragraph"

    def __post_init__(self):
        if self.num_sentences < 1:
            raise ValueError("num_sentences must be >= 1")
        if self.min_sentences > self.max_sentences:
            raise ValueError("min_sentences must not exceed max_sentences")
        if self.rep_penalty < 0:
            raise ValueError("rep_penalty must be >= 0")
        if self.penalty_scope not in ("paragraph", "sentence"):
            raise ValueError("penalty_scope must be 'paragraph' or 'sentence'")


def apply_repetition_penalty(logits: np.ndarray, history, gamma: float,
                             block_trigrams: bool) -> np.ndarray:
    """Adjusted copy of ``logits`` given the emitted token history.

    Every token loses gamma times its count in the history; with blocking on,
    any token that would repeat an already-seen trigram is set to -inf.
    """
    out = np.array(logits, dtype=np.float64, copy=True)
    history = list(history)
    if gamma > 0:
        for tok in history:
            out[tok] -= gamma
    if block_trigrams and len(history) >= 2:
        last2 = (history[-2], history[-1])
        for a, b, c in zip(history, history[1:], history[2:]):
            if (a, b) == last2:
                out[c] = NEG_INF
    return out


def greedy_decode(model: ParagraphModel, features, dc: DecodeConfig, vocab: Vocab,
                  num_sentences: int = None) -> list:
    """Decode one paragraph as a list of sentences (lists of word indices).

    <eos> terminates a sentence early and is not included in the returned
    words; a sentence that never emits <eos> stops at the word budget.
    """
    cfg = model.cfg
    n_sent = num_sentences if num_sentences is not None else dc.num_sentences
    n_words = min(dc.max_words or cfg.max_words, cfg.max_words)

    feats = features if isinstance(features, Tensor) else Tensor(np.asarray(features))
    global_feat, regions = model.project_features(feats)

    state = TopicState(capacity=n_sent)
    sentences = []
    paragraph_history = []
    for j in range(n_sent):
        if j == 0 or not sentences[-1]:
            context = Tensor(np.zeros(cfg.context_dim))
        else:
            prev = sentences[-1]
            embeds = model.embed(np.asarray(prev, dtype=np.int64))
            context = model.pool_context(embeds, np.ones(len(prev)))
        topic = model.topic_forward(state, global_feat, context)

        history = paragraph_history if dc.penalty_scope == "paragraph" else []
        prefix = [vocab.start]
        words = []
        for _ in range(n_words):
            logits = model.sentence_forward(topic, prefix, regions)
            row = logits.data[-1]
            if dc.rep_penalty > 0 or dc.block_trigrams:
                row = apply_repetition_penalty(row, history, dc.rep_penalty, dc.block_trigrams)
            tok = int(np.argmax(row))
            history.append(tok)
            if tok == vocab.eos:
                words.append(tok)
                break
            words.append(tok)
            prefix.append(tok)
        sentences.append(words)
    return sentences


def decode_adaptive(model: ParagraphModel, predictor: SentenceCountPredictor, features,
                    dc: DecodeConfig, vocab: Vocab) -> list:
    """Greedy decode with the sentence count predicted then clamped."""
    feats = features if isinstance(features, Tensor) else Tensor(np.asarray(features))
    global_feat, _ = model.project_features(feats)
    n = predict_sentence_count(predictor, global_feat,
                               min_sentences=dc.min_sentences,
                               max_sentences=dc.max_sentences)
    return greedy_decode(model, feats, dc, vocab, num_sentences=n)


def sentences_to_text(sentences, vocab: Vocab) -> str:
    """Line-structured paragraph: one sentence per line, specials dropped."""
    lines = []
    for words in sentences:
        toks = [vocab.decode_index(w) for w in words if w not in
                (vocab.pad, vocab.start, vocab.eos, vocab.unk)]
        lines.append(" ".join(toks))
    return "\n".join(lines)


def write_paragraphs(paragraph_texts, fh):
    """Emit paragraphs separated by blank lines (bit-exact metric format)."""
    for i, text in enumerate(paragraph_texts):
        if i:
            fh.write("\n")
        fh.write(text + "\n")


def read_paragraphs(fh) -> list:
    """Parse the line-structured format back into lists of sentence strings."""
    paragraphs, current = [], []
    for line in fh:
        line = line.rstrip("\n")
        if line == "":
            if current:
                paragraphs.append(current)
                current = []
        else:
            current.append(line)
    if current:
        paragraphs.append(current)
    return paragraphs
