"""Training: MLE steps, the reversed-target twin network, and the W-GAN critic.

The forward network trains by teacher-forced cross entropy. In twin modes a
second network of identical shape trains on per-paragraph-reversed targets,
and the forward network's pre-logit hidden frames are pulled toward the
backward network's aligned frames, either by an L2 penalty, by a Wasserstein
critic (trained 5 steps per generator step, weights clipped after every
step), or both. Only the forward network is ever consulted at inference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .corpus import ParagraphBatch, pad_feature_batch
from .layers import BiGruCell, Layer, Linear
from .model import ModelConfig, ParagraphModel, SentenceCountPredictor
from .tensor import RngState, Tensor, cross_entropy, gather_rows

log = logging.getLogger(__name__)

TWIN_MODES = ("none", "l2", "adversarial", "l2_plus_adversarial")


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; the epoch is aborted."""


@dataclass
class TwinConfig:
    mode: str = "none"
    lambda_l2: float = 1.0
    lambda_adv: float = 0.001
    critic_lr: float = 2e-4
    critic_steps: int = 5
    weight_clip: float = 0.01
    critic_hidden: int = 512
    reverse_granularity: str = "paragraph"

    def __post_init__(self):
        if self.mode not in TWIN_MODES:
            raise ValueError(f"twin mode must be one of {TWIN_MODES}, got {self.mode!r}")
        if self.lambda_l2 < 0 or self.lambda_adv < 0:
            raise ValueError("twin loss weights must be >= 0")
        if self.critic_steps < 1:
            raise ValueError("critic_steps must be >= 1")
        if self.reverse_granularity not in ("paragraph", "sentence"):
            raise ValueError("reverse_granularity must be 'paragraph' or 'sentence'")

    @property
    def uses_l2(self) -> bool:
        return self.mode in ("l2", "l2_plus_adversarial")

    @property
    def uses_adversarial(self) -> bool:
        return self.mode in ("adversarial", "l2_plus_adversarial")


class RmspropOptimizer:
    """RMSprop: v <- a*v + (1-a)*g^2; p <- p - lr*g/(sqrt(v)+eps)."""

    def __init__(self, params: dict, lr: float, alpha: float = 0.9, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.alpha = alpha
        self.eps = eps
        self.state = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self):
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
            v = self.state[name]
            v *= self.alpha
            v += (1.0 - self.alpha) * g * g
            p.data -= self.lr * g / (np.sqrt(v) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict:
        return self.state

    def load_state(self, arrays: dict):
        for name in self.state:
            if name in arrays:
                self.state[name] = np.asarray(arrays[name], dtype=np.float64).reshape(
                    self.state[name].shape)


class Critic(Layer):
    """Wasserstein critic: bi-GRU over hidden-frame sequences, affine to a score."""

    def __init__(self, rng: RngState, in_dim: int, hidden: int):
        self.gru = BiGruCell(rng, in_dim, hidden)
        self.head = Linear(rng, 2 * hidden, 1)

    def score(self, seqs: Tensor) -> Tensor:
        """seqs: [B, T, C] -> unbounded scores [B, 1]."""
        _, final = self.gru(seqs)
        return self.head(final)

    def clip_weights(self, c: float):
        for p in self.named_parameters().values():
            np.clip(p.data, -c, c, out=p.data)


# -- target reversal -------------------------------------------------------------


def reverse_targets(batch: ParagraphBatch, granularity: str = "paragraph") -> ParagraphBatch:
    """Reverse each paragraph's valid token stream in place over the mask.

    The mask layout is untouched: valid slots keep their positions, the
    tokens they hold are read out in sentence-major order, reversed, and
    written back. ``granularity='sentence'`` reverses within each sentence
    instead.
    """
    tokens = batch.tokens.copy()
    B, M, N = tokens.shape
    flat_t = tokens.reshape(B, M * N)
    flat_m = batch.mask.reshape(B, M * N)
    for b in range(B):
        if granularity == "paragraph":
            idx = np.flatnonzero(flat_m[b])
            flat_t[b, idx] = flat_t[b, idx][::-1]
        else:
            for j in range(M):
                idx = np.flatnonzero(batch.mask[b, j]) + j * N
                flat_t[b, idx] = flat_t[b, idx][::-1]
    return ParagraphBatch(tokens, batch.mask.copy(), batch.sentence_counts.copy(),
                          list(batch.feature_refs))


def _twin_alignment_rows(mask: np.ndarray):
    """Row indices pairing forward frames with same-target backward frames.

    For the flattened [B*M*N, C] hidden grids, forward row vi[t] pairs with
    backward row vi[L-1-t] (the backward network predicts the reversed
    stream, so its frame for the same target sits mirrored over the valid
    positions).
    """
    B = mask.shape[0]
    MN = mask.shape[1] * mask.shape[2]
    flat = mask.reshape(B, MN)
    rows_f, rows_b = [], []
    for b in range(B):
        idx = np.flatnonzero(flat[b]) + b * MN
        rows_f.append(idx)
        rows_b.append(idx[::-1])
    return np.concatenate(rows_f), np.concatenate(rows_b)


def twin_l2_loss(h_fwd: Tensor, h_bwd: Tensor, mask) -> Tensor:
    """Mean squared coordinate difference between aligned hidden frames.

    ``h_fwd`` and ``h_bwd`` are [T, C] (or [B, M, N, C] grids) sharing one
    mask layout; the backward sequence is re-reversed to forward order before
    comparison. The backward frames act as targets (no gradient flows into
    them).
    """
    mask = np.asarray(mask, dtype=bool)
    if h_fwd.shape != h_bwd.shape:
        raise ValueError(f"hidden shapes differ: {h_fwd.shape} vs {h_bwd.shape}")
    if h_fwd.ndim == 2:
        grid_mask = mask.reshape(1, 1, -1)
        C = h_fwd.shape[-1]
        flat_f, flat_b = h_fwd, h_bwd
    else:
        grid_mask = mask
        C = h_fwd.shape[-1]
        flat_f = h_fwd.reshape(-1, C)
        flat_b = h_bwd.reshape(-1, C)
    if grid_mask.size != flat_f.shape[0]:
        raise ValueError("mask size does not match hidden sequence length")
    rows_f, rows_b = _twin_alignment_rows(grid_mask)
    picked_f = gather_rows(flat_f, rows_f)
    target_b = Tensor(flat_b.data.reshape(-1, C)[rows_b])
    diff = picked_f - target_b
    return (diff * diff).mean()


# -- hidden-frame plumbing for the critic ----------------------------------------


def _masked_grid(h: Tensor, mask: np.ndarray) -> Tensor:
    """Zero the masked frames of a [B, M, N, C] grid and flatten to [B, M*N, C]."""
    B, M, N, C = h.shape
    m = mask.reshape(B, M * N, 1).astype(np.float64)
    return h.reshape(B, M * N, C) * Tensor(m)


def _aligned_backward_frames(h_bwd_data: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Re-reverse the backward network's frames to forward order (numpy only)."""
    B, M, N, C = h_bwd_data.shape
    out = np.zeros((B, M * N, C))
    flat = h_bwd_data.reshape(B, M * N, C)
    fm = mask.reshape(B, M * N)
    for b in range(B):
        idx = np.flatnonzero(fm[b])
        out[b, idx] = flat[b, idx[::-1]]
    return out


def critic_step(critic: Critic, h_fwd_detached: Tensor, h_bwd_detached: Tensor,
                opt: RmspropOptimizer, weight_clip: float) -> float:
    """One W-GAN critic update: forward frames are fake, backward frames real."""
    opt.zero_grad()
    loss = critic.score(h_fwd_detached).mean() - critic.score(h_bwd_detached).mean()
    loss.backward()
    opt.step()
    critic.clip_weights(weight_clip)
    return float(loss.data)


def adversarial_generator_loss(critic: Critic, h_fwd: Tensor) -> Tensor:
    """Wasserstein generator objective: -mean(score(forward frames))."""
    return -critic.score(h_fwd).mean()


# -- step functions ---------------------------------------------------------------


def batch_ce(model: ParagraphModel, batch: ParagraphBatch, features: Tensor,
             region_mask, start_index: int):
    logits, hidden, global_feat = model.paragraph_forward(
        batch.tokens, batch.mask, features, region_mask, start_index=start_index)
    loss = cross_entropy(logits, batch.tokens, batch.mask)
    return loss, hidden, global_feat


def mle_step(model: ParagraphModel, batch: ParagraphBatch, features: Tensor,
             region_mask, opt: RmspropOptimizer, start_index: int = 1) -> float:
    opt.zero_grad()
    loss, _, _ = batch_ce(model, batch, features, region_mask, start_index)
    if not np.isfinite(loss.data):
        raise TrainingDiverged(f"non-finite MLE loss {loss.data}")
    loss.backward()
    opt.step()
    return float(loss.data)


@dataclass
class EpochStats:
    ce_fwd: float
    ce_bwd: float = float("nan")
    twin_l2: float = float("nan")
    critic_loss: float = float("nan")
    critic_updates: int = 0
    generator_updates: int = 0


class TwinTrainer:
    """Holds the forward/backward networks, the critic, and their optimizers."""

    GEN_RNG, BWD_RNG, CRITIC_RNG, PRED_RNG = 1, 2, 3, 4

    def __init__(self, cfg: ModelConfig, twin: TwinConfig, seed: int, lr: float,
                 start_index: int = 1):
        self.cfg = cfg
        self.twin = twin
        self.seed = seed
        self.start_index = start_index
        root = RngState(seed)
        self.model = ParagraphModel(cfg, root.child(self.GEN_RNG))
        self.opt = RmspropOptimizer(self.model.named_parameters(), lr=lr)
        self.model_bwd = None
        self.opt_bwd = None
        self.critic = None
        self.opt_critic = None
        if twin.mode != "none":
            self.model_bwd = ParagraphModel(cfg, root.child(self.BWD_RNG))
            self.opt_bwd = RmspropOptimizer(self.model_bwd.named_parameters(), lr=lr)
        if twin.uses_adversarial:
            self.critic = Critic(root.child(self.CRITIC_RNG), cfg.channels, twin.critic_hidden)
            self.opt_critic = RmspropOptimizer(self.critic.named_parameters(), lr=twin.critic_lr)
        self.predictor = SentenceCountPredictor(root.child(self.PRED_RNG), cfg.proj_dim,
                                                cfg.max_sentences)
        self.opt_pred = RmspropOptimizer(self.predictor.named_parameters(), lr=lr)

    def train_batch(self, batch: ParagraphBatch, train_predictor: bool = True) -> EpochStats:
        """One generator update (plus 5 critic updates in adversarial modes)."""
        feats, region_mask = pad_feature_batch(batch.feature_refs)
        features = Tensor(feats)
        twin = self.twin

        if twin.mode == "none":
            ce = mle_step(self.model, batch, features, region_mask, self.opt, self.start_index)
            stats = EpochStats(ce_fwd=ce, generator_updates=1)
            if train_predictor:
                self._predictor_step(batch, features, region_mask)
            return stats

        self.opt.zero_grad()
        ce_f, h_f, _ = batch_ce(self.model, batch, features, region_mask, self.start_index)

        rev = reverse_targets(batch, twin.reverse_granularity)
        self.opt_bwd.zero_grad()
        ce_b, h_b, _ = batch_ce(self.model_bwd, rev, features, region_mask, self.start_index)

        if not (np.isfinite(ce_f.data) and np.isfinite(ce_b.data)):
            raise TrainingDiverged(f"non-finite CE (fwd={ce_f.data}, bwd={ce_b.data})")

        stats = EpochStats(ce_fwd=float(ce_f.data), ce_bwd=float(ce_b.data),
                           generator_updates=1)

        aligned_b = _aligned_backward_frames(h_b.data, batch.mask)
        critic_losses = []
        if twin.uses_adversarial:
            fwd_det = Tensor(_masked_grid(h_f, batch.mask).data)
            bwd_det = Tensor(aligned_b)  # invalid frames already zero
            for _ in range(twin.critic_steps):
                critic_losses.append(critic_step(self.critic, fwd_det, bwd_det,
                                                 self.opt_critic, twin.weight_clip))
            stats.critic_updates = twin.critic_steps
            stats.critic_loss = float(np.mean(critic_losses))

        gen_loss = ce_f
        if twin.uses_l2 and twin.lambda_l2 > 0:
            l2 = twin_l2_loss(h_f, h_b.detach(), batch.mask)
            stats.twin_l2 = float(l2.data)
            gen_loss = gen_loss + twin.lambda_l2 * l2
        elif twin.uses_l2:
            stats.twin_l2 = float(twin_l2_loss(h_f, h_b.detach(), batch.mask).data)
        if twin.uses_adversarial and twin.lambda_adv > 0:
            adv = adversarial_generator_loss(self.critic, _masked_grid(h_f, batch.mask))
            gen_loss = gen_loss + twin.lambda_adv * adv

        if not np.isfinite(gen_loss.data):
            raise TrainingDiverged(f"non-finite generator loss {gen_loss.data}")
        gen_loss.backward()
        self.opt.step()

        ce_b.backward()
        self.opt_bwd.step()

        if train_predictor:
            self._predictor_step(batch, features, region_mask)
        return stats

    def _predictor_step(self, batch: ParagraphBatch, features: Tensor, region_mask):
        self.opt_pred.zero_grad()
        global_feat, _ = self.model.project_features(features, region_mask)
        logits = self.predictor(global_feat.detach())
        targets = batch.sentence_counts - 1  # class k predicts k+1 sentences
        loss = cross_entropy(logits, targets)
        loss.backward()
        self.opt_pred.step()

    def eval_ce(self, batch: ParagraphBatch) -> float:
        feats, region_mask = pad_feature_batch(batch.feature_refs)
        loss, _, _ = batch_ce(self.model, batch, Tensor(feats), region_mask, self.start_index)
        return float(loss.data)


def twin_train_epoch(trainer: TwinTrainer, batches, train_predictor: bool = True) -> EpochStats:
    """Run every batch once; returns mean losses and update counts."""
    agg = []
    for batch in batches:
        agg.append(trainer.train_batch(batch, train_predictor=train_predictor))
    if not agg:
        raise ValueError("twin_train_epoch needs at least one batch")

    def mean_of(vals):
        vals = [v for v in vals if not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    return EpochStats(
        ce_fwd=mean_of([s.ce_fwd for s in agg]),
        ce_bwd=mean_of([s.ce_bwd for s in agg]),
        twin_l2=mean_of([s.twin_l2 for s in agg]),
        critic_loss=mean_of([s.critic_loss for s in agg]),
        critic_updates=sum(s.critic_updates for s in agg),
        generator_updates=sum(s.generator_updates for s in agg),
    )
