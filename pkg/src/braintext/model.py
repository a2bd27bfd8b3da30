"""The fused brain-to-text model: tokenizers + projection + decoder (+ LoRA).

One object bundles everything needed to turn a trial's betas into text:
the parcellation, the per-region tokenizers, the fixed low-rank lift into
embedding space, the vocabulary, and the decoder weights. Training code
pulls named parameters from here; generation code uses step_fn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoder import (
    DecoderParams,
    LoraAdapter,
    MultimodalSequence,
    Vocabulary,
    assemble_prompt,
    decoder_forward,
    embed_inputs,
    sequence_loss,
)
from .tokenizers import LowRankProjection, RegionTokenizer, encode_batch
from .world import Parcellation, parcellate


def collate(seqs: list[MultimodalSequence], pad_id: int):
    """Right-pad a batch of assembled sequences to a common length."""
    T = max(s.length for s in seqs)
    ids = np.full((len(seqs), T), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : s.length] = s.token_ids
        mask[i, : s.length] = s.loss_mask
    return ids, mask


@dataclass
class FusionModel:
    vocab: Vocabulary
    decoder: DecoderParams
    tokenizers: list[RegionTokenizer]
    projection: LowRankProjection
    parcellation: Parcellation
    lora: LoraAdapter | None = None

    @property
    def n_brain(self) -> int:
        return len(self.tokenizers)

    def named_parameters(self):
        yield from self.decoder.named_parameters()
        for tok in self.tokenizers:
            yield from tok.named_parameters()
        if self.lora is not None:
            yield from self.lora.named_parameters()

    def parameter(self, name: str) -> Tensor:
        for n, t in self.named_parameters():
            if n == name:
                return t
        raise KeyError(name)

    def tokenizer_weight_names(self) -> set[str]:
        """The weight matrices the tokenizer L2 penalty targets (never biases)."""
        return {
            n
            for tok in self.tokenizers
            for n, _ in tok.named_parameters()
            if n.endswith(".W1") or n.endswith(".W2")
        }

    def phase1_trainable(self) -> set[str]:
        names = {n for tok in self.tokenizers for n, _ in tok.named_parameters()}
        names.update(self.decoder.norm_parameter_names())
        return names

    def phase2_trainable(self) -> set[str]:
        if self.lora is None:
            raise ValueError("phase 2 needs a LoRA adapter attached")
        names = self.phase1_trainable()
        names.update(n for n, _ in self.lora.named_parameters())
        return names

    def set_trainable(self, names: set[str]):
        for n, t in self.named_parameters():
            t.requires_grad = n in names
            t.grad = None

    # ------------------------------------------------------------------
    # encoding and forward passes

    def brain_block(self, betas_batch: np.ndarray) -> Tensor:
        """(B, n_vertices) betas -> (B, R, d_model) brain tokens, graph-building."""
        region_batches = parcellate(np.asarray(betas_batch, dtype=np.float64), self.parcellation)
        return encode_batch(self.tokenizers, self.projection, region_batches)

    def encode_brain(self, betas: np.ndarray) -> np.ndarray:
        """Inference encode of one trial: (n_vertices,) -> (R, d_model)."""
        with ad.no_grad():
            return self.brain_block(np.asarray(betas)[None, :]).data[0]

    def fused_loss(
        self,
        betas_batch: np.ndarray,
        seqs: list[MultimodalSequence],
        dropout_rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, int]:
        """Masked answer loss for a batch; returns (loss, masked position count)."""
        ids, mask = collate(seqs, self.vocab.pad_id)
        brain = self.brain_block(betas_batch)
        inputs = embed_inputs(self.decoder, ids, brain=brain, n_brain=self.n_brain)
        logits = decoder_forward(self.decoder, inputs, lora=self.lora, dropout_rng=dropout_rng)
        return sequence_loss(logits, ids, mask), int(mask[:, 1:].sum())

    def text_loss(
        self,
        ids: np.ndarray,
        mask: np.ndarray,
        pos_offsets: np.ndarray | None = None,
    ) -> tuple[Tensor, int]:
        """Text-only LM loss (pretraining); no brain block, optional position jitter."""
        inputs = embed_inputs(self.decoder, ids, pos_offsets=pos_offsets)
        logits = decoder_forward(self.decoder, inputs, lora=self.lora)
        return sequence_loss(logits, ids, mask), int(np.asarray(mask)[:, 1:].sum())

    # ------------------------------------------------------------------
    # generation interface

    def step_fn(self, brain_tokens: np.ndarray, question: str, max_new_tokens: int):
        """Closure mapping generated-suffix ids to next-token logits.

        Structural specials (pad, bos, instruction markers, unk) are masked
        out of the logits so decoding can only emit real words or EOS.
        """
        brain = np.asarray(brain_tokens, dtype=np.float64)
        if brain.ndim != 2 or brain.shape[0] != self.n_brain:
            raise ValueError(
                f"expected {self.n_brain} brain tokens of width "
                f"{self.decoder.config.d_model}, got shape {brain.shape}"
            )
        prompt = assemble_prompt(
            self.n_brain,
            self.vocab.encode(question),
            None,
            self.vocab,
            self.decoder.config.max_seq_len,
        )
        if prompt.length + max_new_tokens > self.decoder.config.max_seq_len:
            raise ValueError(
                f"prompt length {prompt.length} + {max_new_tokens} new tokens "
                f"exceeds max_seq_len {self.decoder.config.max_seq_len}"
            )
        banned = [
            self.vocab.pad_id,
            self.vocab.bos_id,
            self.vocab.inst_open_id,
            self.vocab.inst_close_id,
            self.vocab.unk_id,
        ]
        brain_t = Tensor(brain[None, :, :])
        base_ids = prompt.token_ids

        def step(suffix_ids) -> np.ndarray:
            ids = np.concatenate([base_ids, np.asarray(suffix_ids, dtype=np.int64)])[None, :]
            with ad.no_grad():
                inputs = embed_inputs(self.decoder, ids, brain=brain_t, n_brain=self.n_brain)
                logits = decoder_forward(self.decoder, inputs, lora=self.lora)
            out = logits.data[0, -1].copy()
            out[banned] = -1e30
            return out

        return step

    def answer(self, betas: np.ndarray, question: str, gen_cfg) -> str:
        from .decoding import generate

        return generate(self, self.encode_brain(betas), question, gen_cfg)
