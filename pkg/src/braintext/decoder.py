"""Word-level vocabulary, prompt assembly, and the small causal decoder.

The decoder is a pre-norm transformer with tied input/output embeddings
and learned positions. Brain tokens are injected as already-embedded
vectors occupying a contiguous slot block right after BOS; everything
else is ordinary token embedding lookup.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import substream

PAD, BOS, EOS, INST_OPEN, INST_CLOSE, UNK = (
    "<pad>",
    "<bos>",
    "<eos>",
    "<inst>",
    "</inst>",
    "<unk>",
)
SPECIALS = (PAD, BOS, EOS, INST_OPEN, INST_CLOSE, UNK)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
# no space before these when detokenizing, none after an opener
_CLOSERS = {".", ",", "?", "!", ";", ":", ")", "]"}
_OPENERS = {"(", "["}


def word_tokens(text: str) -> list[str]:
    """Lowercase word/punctuation split. Inverse of detokenize up to case."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: list[str]) -> str:
    out = []
    for tok in tokens:
        if out and tok not in _CLOSERS and out[-1] not in _OPENERS:
            out.append(" ")
        out.append(tok)
    return "".join(out)


class Vocabulary:
    """Closed word-level vocabulary built from a text corpus.

    Specials occupy the first ids in a fixed order; corpus tokens follow
    in sorted order so construction is deterministic.
    """

    def __init__(self, tokens: list[str]):
        if list(tokens[: len(SPECIALS)]) != list(SPECIALS):
            raise ValueError("vocabulary must start with the special tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.inst_open_id = self.index[INST_OPEN]
        self.inst_close_id = self.index[INST_CLOSE]
        self.unk_id = self.index[UNK]

    @classmethod
    def build(cls, texts) -> "Vocabulary":
        seen = set()
        for text in texts:
            seen.update(word_tokens(text))
        return cls(list(SPECIALS) + sorted(seen))

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, self.unk_id) for t in word_tokens(text)]

    def decode(self, ids) -> str:
        special_ids = {self.index[s] for s in SPECIALS}
        return detokenize([self.tokens[i] for i in ids if i not in special_ids])


@dataclass
class DecoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 160
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must divide evenly into heads")


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class LayerParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    W_in: Tensor
    W_out: Tensor


@dataclass
class DecoderParams:
    config: DecoderConfig
    embed: Tensor
    positions: Tensor
    layers: list[LayerParams]
    final_gain: Tensor
    final_bias: Tensor

    @classmethod
    def init(cls, config: DecoderConfig, seed: int) -> "DecoderParams":
        rng = substream(seed, "init.decoder")
        d, dff = config.d_model, config.d_ff

        def p(arr):
            return Tensor(arr, requires_grad=True)

        embed = p(rng.normal(0.0, 0.02, size=(config.vocab_size, d)))
        positions = p(rng.normal(0.0, 0.02, size=(config.max_seq_len, d)))
        layers = []
        for _ in range(config.n_layers):
            layers.append(
                LayerParams(
                    ln1_gain=p(np.ones(d)),
                    ln1_bias=p(np.zeros(d)),
                    Wq=p(_uniform(rng, (d, d), d)),
                    Wk=p(_uniform(rng, (d, d), d)),
                    Wv=p(_uniform(rng, (d, d), d)),
                    Wo=p(_uniform(rng, (d, d), d)),
                    ln2_gain=p(np.ones(d)),
                    ln2_bias=p(np.zeros(d)),
                    W_in=p(_uniform(rng, (dff, d), d)),
                    W_out=p(_uniform(rng, (d, dff), dff)),
                )
            )
        return cls(
            config=config,
            embed=embed,
            positions=positions,
            layers=layers,
            final_gain=p(np.ones(d)),
            final_bias=p(np.zeros(d)),
        )

    def named_parameters(self):
        yield "embed.tokens", self.embed
        yield "embed.positions", self.positions
        for i, layer in enumerate(self.layers):
            prefix = f"layer{i}."
            yield prefix + "ln1.gain", layer.ln1_gain
            yield prefix + "ln1.bias", layer.ln1_bias
            yield prefix + "attn.Wq", layer.Wq
            yield prefix + "attn.Wk", layer.Wk
            yield prefix + "attn.Wv", layer.Wv
            yield prefix + "attn.Wo", layer.Wo
            yield prefix + "ln2.gain", layer.ln2_gain
            yield prefix + "ln2.bias", layer.ln2_bias
            yield prefix + "mlp.W_in", layer.W_in
            yield prefix + "mlp.W_out", layer.W_out
        yield "final_norm.gain", self.final_gain
        yield "final_norm.bias", self.final_bias

    def norm_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if ".ln" in n or n.startswith("final_norm")]


@dataclass
class LoraAdapter:
    """Low-rank deltas on the query and value projections of every layer.

    Effective weight is W + (alpha/rank) * B @ A with B zero at init, so a
    fresh adapter is an exact no-op. Dropout acts on the adapter input
    path only, and only while training.
    """

    rank: int
    alpha: float
    dropout_rate: float
    targets: dict = field(default_factory=dict)  # (layer, "q"|"v") -> (A, B)

    @classmethod
    def init(
        cls,
        config: DecoderConfig,
        seed: int,
        rank: int = 16,
        alpha: float = 16.0,
        dropout_rate: float = 0.05,
    ) -> "LoraAdapter":
        rng = substream(seed, "init.lora")
        targets = {}
        d = config.d_model
        for layer in range(config.n_layers):
            for which in ("q", "v"):
                A = Tensor(_uniform(rng, (rank, d), d), requires_grad=True)
                B = Tensor(np.zeros((d, rank)), requires_grad=True)
                targets[(layer, which)] = (A, B)
        return cls(rank=rank, alpha=alpha, dropout_rate=dropout_rate, targets=targets)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def named_parameters(self):
        for (layer, which), (A, B) in sorted(self.targets.items()):
            yield f"lora.layer{layer}.{which}.A", A
            yield f"lora.layer{layer}.{which}.B", B


@dataclass
class MultimodalSequence:
    """Layout of one fused prompt: BOS, brain slots, instruction, answer."""

    token_ids: np.ndarray  # (T,) int64; brain slots hold pad_id and are never read
    loss_mask: np.ndarray  # (T,) bool; true exactly on answer tokens and EOS
    n_brain: int

    @property
    def length(self) -> int:
        return len(self.token_ids)


class SequenceTooLong(ValueError):
    pass


def assemble_prompt(
    n_brain: int,
    question_ids: list[int],
    answer_ids,
    vocab: Vocabulary,
    max_seq_len: int,
) -> MultimodalSequence:
    """BOS + brain slots + <inst> question </inst> [+ answer + EOS].

    answer_ids None builds a generation-time prompt (no loss positions).
    """
    ids = [vocab.bos_id] + [vocab.pad_id] * n_brain
    ids += [vocab.inst_open_id] + list(question_ids) + [vocab.inst_close_id]
    mask = [False] * len(ids)
    if answer_ids is not None:
        ids += list(answer_ids) + [vocab.eos_id]
        mask += [True] * (len(answer_ids) + 1)
    if len(ids) > max_seq_len:
        raise SequenceTooLong(
            f"assembled length {len(ids)} exceeds max_seq_len {max_seq_len}"
        )
    return MultimodalSequence(
        token_ids=np.asarray(ids, dtype=np.int64),
        loss_mask=np.asarray(mask, dtype=bool),
        n_brain=n_brain,
    )


def embed_inputs(
    params: DecoderParams,
    token_ids: np.ndarray,
    brain: Tensor | None = None,
    n_brain: int = 0,
    pos_offsets: np.ndarray | None = None,
) -> Tensor:
    """Token ids (B, T) plus optional brain block (B, R, d_model) -> embedded inputs.

    Brain vectors replace the embeddings at slots 1..n_brain. Position rows
    can start at a per-sample offset (used to jitter text-only pretraining).
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ValueError("token_ids must be (batch, time)")
    B, T = ids.shape
    if T > params.config.max_seq_len:
        raise SequenceTooLong(f"sequence length {T} exceeds {params.config.max_seq_len}")
    if brain is not None:
        if n_brain <= 0:
            raise ValueError("brain block given but n_brain is 0")
        head = ad.embedding(params.embed, ids[:, :1])
        tail = ad.embedding(params.embed, ids[:, 1 + n_brain :])
        x = ad.concat([head, brain, tail], axis=1)
    else:
        x = ad.embedding(params.embed, ids)
    pos_idx = np.broadcast_to(np.arange(T, dtype=np.int64), (B, T))
    if pos_offsets is not None:
        pos_idx = pos_idx + np.asarray(pos_offsets, dtype=np.int64)[:, None]
        if pos_idx.max() >= params.config.max_seq_len:
            raise SequenceTooLong("position offset pushes past max_seq_len")
    return x + ad.embedding(params.positions, pos_idx)


def _causal_mask(T: int) -> Tensor:
    m = np.triu(np.full((T, T), -1e30), k=1)
    return Tensor(m)


def decoder_forward(
    params: DecoderParams,
    inputs: Tensor,
    lora: LoraAdapter | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Embedded inputs (B, T, d_model) -> logits (B, T, vocab) with tied head."""
    cfg = params.config
    B, T, D = inputs.shape
    H = cfg.n_heads
    dh = D // H
    mask = _causal_mask(T)
    scale = 1.0 / np.sqrt(dh)
    x = inputs

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

    for li, layer in enumerate(params.layers):
        h = ad.layer_norm(x, layer.ln1_gain, layer.ln1_bias, cfg.ln_eps)
        q = ad.matmul(h, ad.transpose(layer.Wq, (1, 0)))
        k = ad.matmul(h, ad.transpose(layer.Wk, (1, 0)))
        v = ad.matmul(h, ad.transpose(layer.Wv, (1, 0)))
        if lora is not None:
            h_drop = h
            if dropout_rng is not None and lora.dropout_rate > 0.0:
                h_drop = ad.dropout(h, lora.dropout_rate, dropout_rng)
            for which in ("q", "v"):
                A, Bmat = lora.targets[(li, which)]
                delta = ad.matmul(
                    ad.matmul(h_drop, ad.transpose(A, (1, 0))),
                    ad.transpose(Bmat, (1, 0)),
                )
                delta = ad.mul(delta, lora.scaling)
                if which == "q":
                    q = q + delta
                else:
                    v = v + delta
        qh, kh, vh = heads(q), heads(k), heads(v)
        scores = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), scale)
        scores = scores + mask
        att = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(att, vh)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, D))
        x = x + ad.matmul(ctx, ad.transpose(layer.Wo, (1, 0)))
        h2 = ad.layer_norm(x, layer.ln2_gain, layer.ln2_bias, cfg.ln_eps)
        ff = ad.matmul(ad.gelu(ad.matmul(h2, ad.transpose(layer.W_in, (1, 0)))), ad.transpose(layer.W_out, (1, 0)))
        x = x + ff
    x = ad.layer_norm(x, params.final_gain, params.final_bias, cfg.ln_eps)
    return ad.matmul(x, ad.transpose(params.embed, (1, 0)))


def sequence_loss(logits: Tensor, token_ids: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    return ad.cross_entropy_masked(logits, token_ids, loss_mask)
