"""Hierarchical paragraph generator.

An image feature matrix is projected per region and max-pooled into a global
vector. A causal topic convolution stack turns the global vector plus the
pooled embedding of the previous sentence (the context) into one topic vector
per sentence slot, feeding each slot autoregressively with the previous
topic. A causal word convolution stack decodes each topic into word logits,
with additive visual attention over region features injected after selected
layers. Training is teacher-forced and fully parallel over word positions;
only the sequential topic loop remains.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .layers import (MASK_NEG, CausalConvBlock, Embedding, Layer, Linear,
                     MultiHeadSelfAttention, VisualAttention)
from .tensor import RngState, ShapeError, Tensor, concat, stack

log = logging.getLogger(__name__)

POOL_MODES = ("mean", "self_attention")


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults follow the full-scale setup."""

    vocab_size: int
    max_sentences: int = 6
    max_words: int = 30
    visual_dim: int = 4096
    proj_dim: int = 512
    topic_dim: int = 512
    embed_dim: int = 512
    context_dim: int = 512
    channels: int = 512
    topic_kernel: int = 5
    word_kernel: int = 5
    topic_depth: int = 4
    word_depth: int = 5
    pooling: str = "mean"
    attn_layers: tuple = (2, 4)
    attn_heads: int = 8

    def __post_init__(self):
        self.attn_layers = tuple(self.attn_layers)
        for name in ("vocab_size", "max_sentences", "max_words", "visual_dim", "proj_dim",
                     "topic_dim", "embed_dim", "context_dim", "channels", "topic_kernel",
                     "word_kernel", "topic_depth", "word_depth", "attn_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.pooling not in POOL_MODES:
            raise ValueError(f"pooling must be one of {POOL_MODES}, got {self.pooling!r}")
        if any(i < 1 or i >= self.word_depth for i in self.attn_layers):
            raise ValueError(f"attention layer indices {self.attn_layers} must lie in "
                             f"[1, word_depth={self.word_depth})")
        if self.topic_dim != self.channels:
            raise ValueError("topic_dim must equal channels: the topic is the stack's output frame")
        if self.context_dim != self.embed_dim:
            raise ValueError("context_dim must equal embed_dim: the context is a pooled embedding")
        if self.embed_dim % self.attn_heads != 0:
            raise ValueError("embed_dim must be divisible by attn_heads")


@dataclass
class TopicState:
    """Topics and contexts accumulated while generating one paragraph."""

    capacity: int
    topics: list = field(default_factory=list)
    contexts: list = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("TopicState capacity must be >= 1")


class ParagraphModel(Layer):
    def __init__(self, cfg: ModelConfig, rng: RngState):
        self.cfg = cfg
        c = cfg
        self.feat_proj = Linear(rng, c.visual_dim, c.proj_dim)
        self.embed = Embedding(rng, c.vocab_size, c.embed_dim)
        if c.pooling == "self_attention":
            self.ctx_attn = MultiHeadSelfAttention(rng, c.embed_dim, c.attn_heads)
        self.topic_start = Tensor(rng.uniform(-0.1, 0.1, (c.embed_dim,)), requires_grad=True)
        self.topic_in_embed = Linear(rng, c.channels, c.embed_dim)
        self.topic_in = Linear(rng, c.embed_dim + c.proj_dim + c.context_dim, c.channels)
        self.topic_blocks = [CausalConvBlock(rng, c.channels, c.channels, c.topic_kernel)
                             for _ in range(c.topic_depth)]
        self.word_in = Linear(rng, c.embed_dim + c.topic_dim, c.channels)
        self.word_blocks = [CausalConvBlock(rng, c.channels, c.channels, c.word_kernel)
                            for _ in range(c.word_depth)]
        self.word_attn = {}
        for layer_idx in c.attn_layers:
            self.word_attn[str(layer_idx)] = _AttentionTap(rng, c.channels, c.proj_dim)
        self.vocab_head = Linear(rng, c.channels, c.vocab_size)

    # -- feature projection ---------------------------------------------------

    def project_features(self, raw: Tensor, region_mask=None):
        """raw: [R, d_I] or [B, R, d_I] -> (global [.., proj], regions [.., R, proj]).

        Regions get an affine map; the global vector is the element-wise max
        over (unmasked) regions.
        """
        squeeze = raw.ndim == 2
        if squeeze:
            raw = raw.reshape((1,) + raw.shape)
        if raw.shape[-2] == 0:
            raise ShapeError("project_features needs at least one region")
        regions = self.feat_proj(raw)  # [B, R, proj]
        if region_mask is None:
            pooled = regions.max(axis=-2)
        else:
            m = np.asarray(region_mask, dtype=np.float64)
            if not m.any(axis=-1).all():
                raise ShapeError("each item needs at least one unmasked region")
            masked = regions + Tensor((m[..., None] - 1.0) * MASK_NEG)
            pooled = masked.max(axis=-2)
        if squeeze:
            return pooled.reshape(pooled.shape[-1:]), regions.reshape(regions.shape[1:])
        return pooled, regions

    # -- context pooling --------------------------------------------------------

    def pool_context(self, embeds: Tensor, mask, mode: str = None) -> Tensor:
        """Masked pooling of previous-sentence embeddings [.., N, d] -> [.., d].

        mean mode averages the embeddings; self_attention mode averages the
        self-attended embeddings. An empty sentence pools to the zero vector.
        """
        mode = mode or self.cfg.pooling
        if mode not in POOL_MODES:
            raise ValueError(f"unknown pooling mode {mode!r}")
        squeeze = embeds.ndim == 2
        if squeeze:
            embeds = embeds.reshape((1,) + embeds.shape)
        m = np.asarray(mask, dtype=np.float64).reshape(embeds.shape[0], embeds.shape[1])
        counts = m.sum(axis=1)
        if (counts == 0).any():
            log.debug("pool_context: empty previous sentence, using zero context")
        if mode == "self_attention":
            embeds = self.ctx_attn(embeds, key_mask=m)
        weighted = embeds * Tensor(m[:, :, None])
        denom = np.maximum(counts, 1.0)[:, None]
        pooled = weighted.sum(axis=1) * Tensor(1.0 / denom)
        return pooled.reshape(pooled.shape[-1:]) if squeeze else pooled

    # -- topic stack ---------------------------------------------------------------

    def _run_topic_stack(self, frames: Tensor) -> Tensor:
        h = frames
        for block in self.topic_blocks:
            h = block(h)
        return h

    def _topic_frame(self, prev_topic, global_feat: Tensor, context: Tensor) -> Tensor:
        """Input frame for one slot: [B, embed + proj + context] -> [B, channels]."""
        B = global_feat.shape[0]
        if prev_topic is None:
            tok = self.topic_start.reshape(1, -1).broadcast_to((B, self.cfg.embed_dim))
        else:
            tok = self.topic_in_embed(prev_topic)
        return self.topic_in(concat([tok, global_feat, context], axis=-1))

    def topic_forward(self, state: TopicState, global_feat: Tensor, context: Tensor) -> Tensor:
        """Extend the paragraph by one topic; mutates ``state`` and returns T_j.

        Slot j's input token is the previous topic through a learned map (a
        learned start vector for slot 1); the frame also carries the global
        image vector and this slot's context. The new topic is the causal
        stack's output at slot j given all frames so far.
        """
        j = len(state.topics) + 1
        if j > state.capacity:
            raise ShapeError(f"topic slot {j} exceeds capacity {state.capacity}")
        if global_feat.ndim == 1:
            global_feat = global_feat.reshape(1, -1)
        if context.ndim == 1:
            context = context.reshape(1, -1)
        state.contexts.append(context)
        frames = stack([self._topic_frame(None if i == 0 else state.topics[i - 1],
                                          global_feat, state.contexts[i])
                        for i in range(j)], axis=1)
        out = self._run_topic_stack(frames)
        topic = out[:, j - 1, :]
        state.topics.append(topic)
        return topic

    def _topics_batched(self, global_feat: Tensor, contexts: list) -> list:
        """Teacher-forced topics for M slots over a batch; contexts is a list of [B, ctx]."""
        topics = []
        frames = []
        for i, ctx in enumerate(contexts):
            prev = topics[i - 1] if i > 0 else None
            frames.append(self._topic_frame(prev, global_feat, ctx))
            out = self._run_topic_stack(stack(frames, axis=1))
            topics.append(out[:, i, :])
        return topics

    # -- word stack -----------------------------------------------------------------

    def _word_stack(self, frames: Tensor, regions: Tensor, region_mask):
        """frames: [B, T, channels] -> (pre-logit frames, logits [B, T, V])."""
        h = frames
        for i, block in enumerate(self.word_blocks, start=1):
            h = block(h)
            tap = self.word_attn.get(str(i))
            if tap is not None:
                h = tap(h, regions, region_mask)
        return h, self.vocab_head(h)

    def sentence_forward(self, topic: Tensor, word_prefix, regions: Tensor,
                         region_mask=None):
        """Logits for each position of one sentence prefix.

        ``word_prefix`` lists the input tokens (starting with <start>); the
        logit row at position t scores the token following prefix[t].
        """
        prefix = np.asarray(word_prefix, dtype=np.int64)
        if prefix.ndim != 1:
            raise ShapeError("sentence_forward expects a flat token prefix")
        if prefix.size > self.cfg.max_words:
            raise ShapeError(f"prefix length {prefix.size} exceeds max_words {self.cfg.max_words}")
        emb = self.embed(prefix)  # [t, embed]
        t = prefix.size
        if topic.ndim == 2:
            topic = topic.reshape(topic.shape[-1:])
        top = topic.reshape(1, -1).broadcast_to((t, self.cfg.topic_dim))
        frames = self.word_in(concat([emb, top], axis=-1)).reshape(1, t, self.cfg.channels)
        if regions.ndim == 2:
            regions = regions.reshape((1,) + regions.shape)
        _, logits = self._word_stack(frames, regions, region_mask)
        return logits.reshape(t, self.cfg.vocab_size)

    # -- teacher-forced paragraph pass --------------------------------------------------

    def paragraph_forward(self, tokens, mask, features: Tensor, region_mask=None,
                          start_index: int = 1):
        """Teacher-forced full pass over a [B, M, N] token grid.

        Returns (logits [B, M, N, V], hidden [B, M, N, channels], global [B, proj]).
        Contexts pool the ground-truth previous sentence; hidden frames are the
        pre-logit features exposed for twin training.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        if tokens.ndim != 3 or mask.shape != tokens.shape:
            raise ShapeError("paragraph_forward expects aligned [B, M, N] tokens and mask")
        B, M, N = tokens.shape
        c = self.cfg

        global_feat, regions = self.project_features(features, region_mask)

        token_embeds = self.embed(tokens)  # [B, M, N, embed]
        contexts = [Tensor(np.zeros((B, c.context_dim)))]
        for j in range(1, M):
            prev = token_embeds[:, j - 1, :, :]
            contexts.append(self.pool_context(prev, mask[:, j - 1, :]))
        topics = self._topics_batched(global_feat, contexts)

        # shift targets right: input 0 is <start>, input t is token t-1
        inputs = np.empty_like(tokens)
        inputs[:, :, 0] = start_index
        inputs[:, :, 1:] = tokens[:, :, :-1]
        in_embeds = self.embed(inputs).reshape(B * M, N, c.embed_dim)
        topic_seq = stack(topics, axis=1).reshape(B * M, 1, c.topic_dim)
        topic_rep = topic_seq.broadcast_to((B * M, N, c.topic_dim))
        frames = self.word_in(concat([in_embeds, topic_rep], axis=-1))

        R = regions.shape[-2]
        reg_rep = regions.reshape(B, 1, R, c.proj_dim).broadcast_to(
            (B, M, R, c.proj_dim)).reshape(B * M, R, c.proj_dim)
        rm_rep = None
        if region_mask is not None:
            rm = np.asarray(region_mask, dtype=np.float64)
            rm_rep = np.broadcast_to(rm.reshape(B, 1, R), (B, M, R)).reshape(B * M, R)

        hidden, logits = self._word_stack(frames, reg_rep, rm_rep)
        return (logits.reshape(B, M, N, c.vocab_size),
                hidden.reshape(B, M, N, c.channels),
                global_feat)


class _AttentionTap(Layer):
    """Visual attention injected into the word stack through a learned projection."""

    def __init__(self, rng: RngState, channels: int, region_dim: int):
        self.attn = VisualAttention(rng, channels, region_dim, channels)
        self.proj = Linear(rng, region_dim, channels)

    def __call__(self, h: Tensor, regions: Tensor, region_mask=None) -> Tensor:
        context, _ = self.attn(h, regions, region_mask)
        return h + self.proj(context)


class SentenceCountPredictor(Layer):
    """Three stacked affine maps from the global image vector to count logits."""

    def __init__(self, rng: RngState, in_dim: int, max_sentences: int,
                 hidden1: int = 256, hidden2: int = 128):
        self.max_sentences = max_sentences
        self.fc1 = Linear(rng, in_dim, hidden1)
        self.fc2 = Linear(rng, hidden1, hidden2)
        self.fc3 = Linear(rng, hidden2, max_sentences)

    def __call__(self, global_feat: Tensor) -> Tensor:
        if global_feat.ndim == 1:
            global_feat = global_feat.reshape(1, -1)
        h = self.fc1(global_feat).relu()
        h = self.fc2(h).relu()
        return self.fc3(h)


def predict_sentence_count(predictor: SentenceCountPredictor, global_feat: Tensor,
                           min_sentences: int = 1, max_sentences: int = None) -> int:
    """Argmax class (1-based count, lowest index wins ties) clamped to [min, max]."""
    logits = predictor(global_feat.detach())
    flat = logits.data.reshape(-1)
    count = int(np.argmax(flat)) + 1
    if max_sentences is None:
        max_sentences = predictor.max_sentences
    return int(np.clip(count, min_sentences, max_sentences))
