"""Deterministic decoding: beam search with a relative min-p filter.

The core operates on a step function (prefix ids -> next-token logits),
so it can be driven by the fused model or by hand-built tables in tests.
Scores are summed log probabilities of the filtered, renormalized
distribution; there is no length penalty. Ties break on token ids so
decoding is fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import substream


@dataclass
class GenerationConfig:
    beams: int = 2
    min_p: float = 0.2
    min_p_mode: str = "relative"
    temperature: float = 1.0
    max_new_tokens: int = 24
    sample: bool = False
    seed: int = 0

    def validate(self):
        if self.beams < 1:
            raise ValueError("beams must be >= 1")
        if not 0.0 <= self.min_p <= 1.0:
            raise ValueError("min_p must be in [0, 1]")
        if self.min_p_mode not in ("relative", "absolute"):
            raise ValueError("min_p_mode must be 'relative' or 'absolute'")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.sample and self.beams != 1:
            raise ValueError("sampling mode is single-beam only")
        return self


def _softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def filtered_distribution(
    logits: np.ndarray, cfg: GenerationConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Token ids surviving the min-p filter and their renormalized probabilities."""
    p = _softmax(logits, cfg.temperature)
    if cfg.min_p_mode == "relative":
        threshold = cfg.min_p * p.max()
    else:
        threshold = cfg.min_p
    keep = np.flatnonzero(p >= threshold)
    if keep.size == 0:  # absolute threshold above every probability
        keep = np.asarray([int(p.argmax())])
    kept_p = p[keep]
    kept_p = kept_p / kept_p.sum()
    order = np.lexsort((keep, -kept_p))
    return keep[order], kept_p[order]


def beam_search(step_fn, eos_id: int, cfg: GenerationConfig) -> list[int]:
    """Best token sequence under the config; step_fn(ids tuple) -> logits."""
    cfg.validate()
    if cfg.sample:
        return _sample_sequence(step_fn, eos_id, cfg)
    # (ids, score, finished)
    beams = [((), 0.0, False)]
    for _ in range(cfg.max_new_tokens):
        candidates = []
        for ids, score, finished in beams:
            if finished:
                candidates.append((ids, score, True))
                continue
            tokens, probs = filtered_distribution(step_fn(ids), cfg)
            for tok, p in zip(tokens[: cfg.beams], probs[: cfg.beams]):
                tok = int(tok)
                candidates.append(
                    (ids + (tok,), score + float(np.log(p)), tok == eos_id)
                )
        candidates.sort(key=lambda c: (-c[1], c[0]))
        beams = candidates[: cfg.beams]
        if all(f for _, _, f in beams):
            break
    ids = beams[0][0]
    return list(ids[:-1] if ids and ids[-1] == eos_id else ids)


def _sample_sequence(step_fn, eos_id: int, cfg: GenerationConfig) -> list[int]:
    rng = substream(cfg.seed, "generation.sample")
    ids: tuple[int, ...] = ()
    for _ in range(cfg.max_new_tokens):
        tokens, probs = filtered_distribution(step_fn(ids), cfg)
        tok = int(rng.choice(tokens, p=probs))
        if tok == eos_id:
            break
        ids = ids + (tok,)
    return list(ids)


@dataclass
class EvidenceTrace:
    text: str
    token_ids: list[int]
    per_step: list[float]  # summed probability of the watched tokens at each step
    aggregate_log: float  # log of the maximum per-step sum


def generate(model, brain_tokens: np.ndarray, question: str, cfg: GenerationConfig) -> str:
    """Decode an answer for one trial. The model supplies prompt assembly
    and next-token logits; see FusionModel."""
    step_fn = model.step_fn(brain_tokens, question, cfg.max_new_tokens)
    ids = beam_search(step_fn, model.vocab.eos_id, cfg)
    return model.vocab.decode(ids)


def token_evidence(
    model,
    brain_tokens: np.ndarray,
    question: str,
    token_set,
    cfg: GenerationConfig,
) -> EvidenceTrace:
    """Greedy decode while recording the probability mass on a token set.

    The recorded mass is taken from the unfiltered softmax at every step,
    before any min-p truncation, so it reflects model belief rather than
    decoding policy.
    """
    tokens = list(dict.fromkeys(token_set))
    if not tokens:
        raise ValueError("token_set must not be empty")
    missing = [t for t in tokens if t not in model.vocab]
    if missing:
        raise ValueError(f"tokens not in vocabulary: {missing}")
    watch = np.asarray([model.vocab.index[t] for t in tokens])
    step_fn = model.step_fn(brain_tokens, question, cfg.max_new_tokens)
    ids: tuple[int, ...] = ()
    per_step = []
    for _ in range(cfg.max_new_tokens):
        logits = step_fn(ids)
        p = _softmax(logits, cfg.temperature)
        per_step.append(float(p[watch].sum()))
        tok = int(p.argmax())
        if tok == model.vocab.eos_id:
            break
        ids = ids + (tok,)
    return EvidenceTrace(
        text=model.vocab.decode(list(ids)),
        token_ids=list(ids),
        per_step=per_step,
        aggregate_log=float(np.log(max(per_step))),
    )
