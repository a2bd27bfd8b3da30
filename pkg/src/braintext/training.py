"""Two-phase fusion training, LM pretraining, AdamW, and gradient checking.

Phase 1 trains the brain tokenizers plus every decoder layer-norm while
the rest of the decoder stays frozen bit-for-bit. Phase 2 adds low-rank
adapters on the query/value projections and fine-tunes adapters together
with tokenizers and norms at a much smaller learning rate. The control
variant repeats both phases on betas shuffled across trials and vertices.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .decoder import assemble_prompt
from .model import FusionModel, collate
from .rng import stable_index, substream
from .world import CAPTION_PROMPTS, Trial, choice_answer, choice_question


class NumericalError(RuntimeError):
    """Training hit a non-finite loss."""


@dataclass
class PhaseConfig:
    name: str
    epochs: int
    lr: float
    batch_size: int
    tokenizer_l2: float = 0.0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.tokenizer_l2 < 0:
            raise ValueError("tokenizer_l2 must be nonnegative")
        return self


def default_phase1() -> PhaseConfig:
    return PhaseConfig(name="phase1", epochs=20, lr=1e-3, batch_size=5, tokenizer_l2=0.2)


def default_phase2() -> PhaseConfig:
    return PhaseConfig(name="phase2", epochs=2, lr=2e-5, batch_size=5, tokenizer_l2=5e-4)


def default_lm_phase() -> PhaseConfig:
    return PhaseConfig(name="lm", epochs=10, lr=1e-3, batch_size=16)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from base_lr to 0 over total_steps, no warmup."""
    if total_steps < 1:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """AdamW with decoupled weight decay on an explicit name set."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named_params, lr: float, decay_names=frozenset(), weight_decay: float = 0.0):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in named_params:
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            update = lr * mhat / (np.sqrt(vhat) + self.eps)
            if weight_decay and name in decay_names:
                update = update + lr * weight_decay * p.data
            p.data = p.data - update


@dataclass
class EpochStats:
    phase: str
    epoch: int
    train_loss: float
    val_loss: float
    lr_last: float


@dataclass
class TrainReport:
    phase: str
    epochs: list[EpochStats] = field(default_factory=list)
    wall_seconds: float = 0.0
    flags: list[str] = field(default_factory=list)

    @property
    def final_val_loss(self) -> float:
        return self.epochs[-1].val_loss if self.epochs else math.nan


# ---------------------------------------------------------------------------
# sample construction

def _qa_or_caption(trial: Trial, pick: int, caption_pick: int) -> tuple[str, str]:
    """Option k of a trial: the five caption prompts first, then its QA pairs."""
    if pick < len(CAPTION_PROMPTS):
        return CAPTION_PROMPTS[pick], trial.captions[caption_pick]
    q, a = trial.qa_pairs[pick - len(CAPTION_PROMPTS)]
    return q, a


def _n_options(trial: Trial) -> int:
    return len(CAPTION_PROMPTS) + len(trial.qa_pairs)


def draw_fused_sample(trial: Trial, rng: np.random.Generator) -> tuple[str, str]:
    pick = int(rng.integers(_n_options(trial)))
    cap = int(rng.integers(len(trial.captions)))
    return _qa_or_caption(trial, pick, cap)


def fixed_fused_sample(trial: Trial, salt: str) -> tuple[str, str]:
    """Deterministic per-trial sample used for validation loss."""
    pick = stable_index(trial.trial_id + salt, _n_options(trial))
    cap = stable_index(trial.trial_id + salt + "cap", len(trial.captions))
    return _qa_or_caption(trial, pick, cap)


def _assemble_fused(model: FusionModel, trial: Trial, question: str, answer: str):
    return assemble_prompt(
        model.n_brain,
        model.vocab.encode(question),
        model.vocab.encode(answer),
        model.vocab,
        model.decoder.config.max_seq_len,
    )


def _fused_val_loss(model: FusionModel, trials: list[Trial], salt: str, batch_size: int = 16) -> float:
    import braintext.autodiff as ad

    total, count = 0.0, 0
    with ad.no_grad():
        for start in range(0, len(trials), batch_size):
            chunk = trials[start : start + batch_size]
            seqs, betas = [], []
            for t in chunk:
                q, a = fixed_fused_sample(t, salt)
                seqs.append(_assemble_fused(model, t, q, a))
                betas.append(t.betas)
            loss, n = model.fused_loss(np.stack(betas), seqs)
            total += loss.item() * n
            count += n
    return total / count


def run_fused_phase(
    model: FusionModel,
    train_trials: list[Trial],
    val_trials: list[Trial],
    phase: PhaseConfig,
    seed: int,
    log=None,
    use_dropout: bool = False,
) -> TrainReport:
    """One training phase over fused sequences; trainable set must be applied
    by the caller via model.set_trainable beforehand."""
    phase.validate()
    t0 = time.perf_counter()
    trainable = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    decay_names = model.tokenizer_weight_names()
    opt = AdamW()
    steps_per_epoch = len(train_trials) // phase.batch_size
    if steps_per_epoch < 1:
        raise ValueError("fewer training trials than one batch")
    total_steps = phase.epochs * steps_per_epoch
    dropout_rng = substream(seed, f"dropout.{phase.name}") if use_dropout else None
    report = TrainReport(phase=phase.name)
    step = 0
    for epoch in range(phase.epochs):
        rng = substream(seed, f"shuffle.{phase.name}.epoch{epoch}")
        order = rng.permutation(len(train_trials))
        losses = []
        lr = phase.lr
        for b in range(steps_per_epoch):  # drop-last batching
            idx = order[b * phase.batch_size : (b + 1) * phase.batch_size]
            seqs, betas = [], []
            for i in idx:
                trial = train_trials[int(i)]
                q, a = draw_fused_sample(trial, rng)
                seqs.append(_assemble_fused(model, trial, q, a))
                betas.append(trial.betas)
            lr = cosine_lr(step, total_steps, phase.lr)
            loss, _ = model.fused_loss(np.stack(betas), seqs, dropout_rng=dropout_rng)
            lv = loss.item()
            if not math.isfinite(lv):
                raise NumericalError(
                    f"{phase.name} hit non-finite loss at epoch {epoch} step {b}"
                )
            loss.backward()
            opt.step(trainable, lr, decay_names, phase.tokenizer_l2)
            for _, p in trainable:
                p.grad = None
            losses.append(lv)
            step += 1
        val_loss = _fused_val_loss(model, val_trials, phase.name)
        stats = EpochStats(
            phase=phase.name,
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_loss=val_loss,
            lr_last=lr,
        )
        report.epochs.append(stats)
        if log:
            log(
                f"{phase.name} epoch {epoch + 1}/{phase.epochs} "
                f"train_loss {stats.train_loss:.4f} val_loss {stats.val_loss:.4f} "
                f"lr {stats.lr_last:.3e}"
            )
    report.wall_seconds = time.perf_counter() - t0
    return report


def train_phase1(model, train_trials, val_trials, phase, seed, log=None) -> TrainReport:
    model.set_trainable(model.phase1_trainable())
    return run_fused_phase(model, train_trials, val_trials, phase, seed, log)


def train_phase2(model, train_trials, val_trials, phase, seed, log=None) -> TrainReport:
    model.set_trainable(model.phase2_trainable())
    return run_fused_phase(
        model, train_trials, val_trials, phase, seed, log, use_dropout=True
    )


# ---------------------------------------------------------------------------
# text-only LM pretraining (the stand-in for a pretrained backbone)

def _choice_options(trial: Trial, category_pool, rng=None, salt: str = ""):
    """Own category plus up to two distractors from the pool, shuffled."""
    own = trial.scene.category
    others = [c for c in category_pool if c != own]
    if rng is not None:
        picked = [others[int(i)] for i in rng.permutation(len(others))[:2]]
        options = [own] + picked
        return [options[int(i)] for i in rng.permutation(len(options))]
    picked = []
    remaining = list(others)
    for tag in ("d1", "d2"):
        if not remaining:
            break
        i = stable_index(trial.trial_id + salt + tag, len(remaining))
        picked.append(remaining.pop(i))
    options = [own] + picked
    pos = stable_index(trial.trial_id + salt + "pos", len(options))
    options.insert(pos, options.pop(0))
    return options


def _lm_sequences(
    model: FusionModel, trial: Trial, rng=None, salt: str = "", category_pool=None
):
    """Text-only sequences per trial: a caption-echo instruction pair, a
    QA-with-context pair, a bare caption, and (given a category pool) a
    forced-choice exemplar. Echo pairs teach the decoder to condition
    answers on earlier context, which fusion training relies on; choice
    exemplars teach the bracketed-option format the probes use.
    """
    vocab = model.vocab
    if rng is not None:
        ca, cb = rng.integers(len(trial.captions)), rng.integers(len(trial.captions))
        prompt = CAPTION_PROMPTS[int(rng.integers(len(CAPTION_PROMPTS)))]
        qa = trial.qa_pairs[int(rng.integers(len(trial.qa_pairs)))]
        bare = trial.captions[int(rng.integers(len(trial.captions)))]
    else:
        ca = stable_index(trial.trial_id + salt + "a", len(trial.captions))
        cb = stable_index(trial.trial_id + salt + "b", len(trial.captions))
        prompt = CAPTION_PROMPTS[stable_index(trial.trial_id + salt, len(CAPTION_PROMPTS))]
        qa = trial.qa_pairs[stable_index(trial.trial_id + salt + "q", len(trial.qa_pairs))]
        bare = trial.captions[ca]
    ids_echo = (
        [vocab.bos_id]
        + vocab.encode(trial.captions[int(ca)])
        + [vocab.inst_open_id]
        + vocab.encode(prompt)
        + [vocab.inst_close_id]
        + vocab.encode(trial.captions[int(cb)])
        + [vocab.eos_id]
    )
    ids_qa = (
        [vocab.bos_id]
        + vocab.encode(trial.captions[int(ca)])
        + [vocab.inst_open_id]
        + vocab.encode(qa[0])
        + [vocab.inst_close_id]
        + vocab.encode(qa[1])
        + [vocab.eos_id]
    )
    ids_bare = [vocab.bos_id] + vocab.encode(bare) + [vocab.eos_id]
    seqs = [ids_echo, ids_qa, ids_bare]
    if category_pool is not None and len(category_pool) > 1:
        options = _choice_options(trial, category_pool, rng=rng, salt=salt)
        seqs.append(
            [vocab.bos_id]
            + vocab.encode(trial.captions[int(ca)])
            + [vocab.inst_open_id]
            + vocab.encode(choice_question(options))
            + [vocab.inst_close_id]
            + vocab.encode(choice_answer(trial.scene.category))
            + [vocab.eos_id]
        )
    return seqs


def _lm_collate(seq_ids: list[list[int]], pad_id: int):
    T = max(len(s) for s in seq_ids)
    ids = np.full((len(seq_ids), T), pad_id, dtype=np.int64)
    mask = np.zeros((len(seq_ids), T), dtype=bool)
    for i, s in enumerate(seq_ids):
        ids[i, : len(s)] = s
        mask[i, 1 : len(s)] = True  # predict everything after BOS
    return ids, mask


def _lm_val_loss(
    model: FusionModel, trials: list[Trial], category_pool=None, batch_size: int = 32
) -> float:
    import braintext.autodiff as ad

    seqs = []
    for t in trials:
        seqs.extend(_lm_sequences(model, t, rng=None, salt="val", category_pool=category_pool))
    total, count = 0.0, 0
    with ad.no_grad():
        for start in range(0, len(seqs), batch_size):
            ids, mask = _lm_collate(seqs[start : start + batch_size], model.vocab.pad_id)
            loss, n = model.text_loss(ids, mask)
            total += loss.item() * n
            count += n
    return total / count


def pretrain_decoder_lm(
    model: FusionModel,
    train_trials: list[Trial],
    val_trials: list[Trial],
    phase: PhaseConfig,
    seed: int,
    position_jitter: int = 0,
    log=None,
) -> TrainReport:
    """Next-token training on text-only sequences; trains the whole decoder.

    position_jitter shifts each sequence to a random starting position so
    the decoder is robust to the slot block that fusion later prepends.
    """
    phase.validate()
    t0 = time.perf_counter()
    model.set_trainable({n for n, _ in model.decoder.named_parameters()})
    trainable = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    opt = AdamW()
    report = TrainReport(phase=phase.name)
    pool = sorted(
        {t.scene.category for t in train_trials}
        | {t.scene.category for t in val_trials}
    )
    seqs_per_trial = 4 if len(pool) > 1 else 3
    n_per_epoch = seqs_per_trial * len(train_trials)
    steps_per_epoch = n_per_epoch // phase.batch_size
    if steps_per_epoch < 1:
        raise ValueError("fewer pretraining sequences than one batch")
    total_steps = phase.epochs * steps_per_epoch
    step = 0
    for epoch in range(phase.epochs):
        rng = substream(seed, f"shuffle.lm.epoch{epoch}")
        seqs = []
        for t in train_trials:
            seqs.extend(_lm_sequences(model, t, rng=rng, category_pool=pool))
        order = rng.permutation(len(seqs))
        losses = []
        lr = phase.lr
        for b in range(steps_per_epoch):
            idx = order[b * phase.batch_size : (b + 1) * phase.batch_size]
            batch = [seqs[int(i)] for i in idx]
            ids, mask = _lm_collate(batch, model.vocab.pad_id)
            offsets = None
            if position_jitter > 0:
                room = model.decoder.config.max_seq_len - ids.shape[1]
                jit = min(position_jitter, room)
                if jit > 0:
                    offsets = rng.integers(0, jit + 1, size=len(batch))
            lr = cosine_lr(step, total_steps, phase.lr)
            loss, _ = model.text_loss(ids, mask, pos_offsets=offsets)
            lv = loss.item()
            if not math.isfinite(lv):
                raise NumericalError(f"lm pretraining hit non-finite loss at step {step}")
            loss.backward()
            opt.step(trainable, lr)
            for _, p in trainable:
                p.grad = None
            losses.append(lv)
            step += 1
        val_loss = _lm_val_loss(model, val_trials, category_pool=pool)
        stats = EpochStats(
            phase=phase.name,
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_loss=val_loss,
            lr_last=lr,
        )
        report.epochs.append(stats)
        if log:
            log(
                f"lm epoch {epoch + 1}/{phase.epochs} "
                f"train_loss {stats.train_loss:.4f} val_loss {stats.val_loss:.4f} "
                f"perplexity {math.exp(stats.val_loss):.2f} lr {stats.lr_last:.3e}"
            )
    report.wall_seconds = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# control dataset

def control_shuffle(trials: list[Trial], seed: int) -> list[Trial]:
    """Break the trial-text pairing and the vertex topography.

    Betas are reassigned across trials by one random permutation, and one
    vertex permutation scrambles every vector the same way, so the value
    multiset is untouched while all structure the tokenizers could exploit
    is destroyed.
    """
    rng = substream(seed, "control.shuffle")
    n = len(trials)
    trial_perm = rng.permutation(n)
    vertex_perm = rng.permutation(len(trials[0].betas))
    return [
        replace(t, betas=trials[int(trial_perm[i])].betas[vertex_perm].copy())
        for i, t in enumerate(trials)
    ]


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(
    build_loss,
    named_params,
    group_of,
    eps: float = 1e-5,
    per_tensor: int = 6,
    seed: int = 0,
) -> dict[str, float]:
    """Central-difference check of analytic gradients.

    build_loss() must rebuild the same scalar loss graph from scratch on
    every call. Returns the max relative error per group, where relative
    error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    named_params = list(named_params)
    for _, p in named_params:
        p.grad = None
        p.requires_grad = True
    loss = build_loss()
    loss.backward()
    analytic = {
        n: (np.zeros_like(p.data) if p.grad is None else np.array(p.grad, copy=True))
        for n, p in named_params
    }
    for _, p in named_params:
        p.grad = None
    rng = substream(seed, "gradcheck.entries")
    worst: dict[str, float] = {}
    for name, p in named_params:
        size = p.data.size
        k = min(per_tensor, size)
        idxs = rng.permutation(size)[:k]
        flat = p.data.reshape(-1)
        for i in idxs:
            i = int(i)
            keep = flat[i]
            flat[i] = keep + eps
            up = build_loss().item()
            flat[i] = keep - eps
            down = build_loss().item()
            flat[i] = keep
            numeric = (up - down) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            g = group_of(name)
            worst[g] = max(worst.get(g, 0.0), rel)
    return worst
