"""Per-region brain tokenizers and the shared low-rank output projection.

Each region gets a one-hidden-layer MLP (exact-erf GeLU) from its vertex
betas to a low-rank code; a fixed PCA basis, fitted once on the decoder's
caption token embeddings, lifts the code into embedding space. One trial
therefore becomes one brain token per region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import substream
from .world import Parcellation


@dataclass
class LowRankProjection:
    """Top PCA directions of a point cloud, rows orthonormal.

    k is the smallest component count whose cumulative explained variance
    reaches the target. lift() maps a k-dim code into the original space
    via the transposed basis (codes live in the centered coordinates, the
    mean is not re-added: brain tokens are offsets in embedding space).
    """

    components: np.ndarray  # (k, d)
    mean: np.ndarray  # (d,)
    explained_variance_ratio: np.ndarray  # (k,)
    target: float

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def d(self) -> int:
        return self.components.shape[1]

    def lift(self, codes: np.ndarray) -> np.ndarray:
        return np.asarray(codes) @ self.components

    def reduce(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.mean) @ self.components.T


def fit_projection(points: np.ndarray, variance_target: float = 0.95) -> LowRankProjection:
    """PCA with the minimal k reaching the cumulative variance target."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need a 2-d array with at least two points")
    if not 0.0 < variance_target <= 1.0:
        raise ValueError("variance_target must be in (0, 1]")
    mean = X.mean(axis=0)
    Xc = X - mean
    total = float((Xc * Xc).sum())
    if total <= 0.0:
        raise ValueError("all points identical: zero total variance")
    # SVD of the centered cloud; singular values give the variance split
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    ratio = (s * s) / float((s * s).sum())
    cum = np.cumsum(ratio)
    k = int(np.searchsorted(cum, variance_target - 1e-12) + 1)
    k = min(k, len(s))
    components = Vt[:k].copy()
    # deterministic sign: largest-magnitude coefficient of each row positive
    for row in components:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return LowRankProjection(
        components=components,
        mean=mean,
        explained_variance_ratio=ratio[:k].copy(),
        target=variance_target,
    )


@dataclass
class RegionTokenizer:
    region_index: int
    W1: Tensor  # (hidden, n_vertices_in_region)
    b1: Tensor  # (hidden,)
    W2: Tensor  # (k, hidden)
    b2: Tensor  # (k,)

    def named_parameters(self):
        prefix = f"tokenizer.region{self.region_index}."
        yield prefix + "W1", self.W1
        yield prefix + "b1", self.b1
        yield prefix + "W2", self.W2
        yield prefix + "b2", self.b2


def init_tokenizers(
    parcellation: Parcellation,
    hidden: int,
    k: int,
    seed: int,
) -> list[RegionTokenizer]:
    """Kaiming-uniform init, bound sqrt(1/fan_in), biases included."""
    if hidden < 1:
        raise ValueError("hidden width must be positive")
    rng = substream(seed, "init.tokenizers")
    out = []
    for r, idx in enumerate(parcellation.regions):
        n_in = len(idx)
        b1 = np.sqrt(1.0 / n_in)
        b2 = np.sqrt(1.0 / hidden)
        out.append(
            RegionTokenizer(
                region_index=r,
                W1=Tensor(rng.uniform(-b1, b1, size=(hidden, n_in)), requires_grad=True),
                b1=Tensor(rng.uniform(-b1, b1, size=hidden), requires_grad=True),
                W2=Tensor(rng.uniform(-b2, b2, size=(k, hidden)), requires_grad=True),
                b2=Tensor(rng.uniform(-b2, b2, size=k), requires_grad=True),
            )
        )
    return out


def encode_batch(
    tokenizers: list[RegionTokenizer],
    projection: LowRankProjection,
    region_batches: list[np.ndarray],
) -> Tensor:
    """Graph-building encode: per-region batches (B, n_r) -> brain block (B, R, D)."""
    if len(region_batches) != len(tokenizers):
        raise ValueError("one batch per region required")
    P = Tensor(projection.components)  # fixed basis, no grad
    parts = []
    B = None
    for tok, x in zip(tokenizers, region_batches):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if B is None:
            B = x.shape[0]
        h = ad.gelu(ad.matmul(Tensor(x), ad.transpose(tok.W1, (1, 0))) + tok.b1)
        code = ad.matmul(h, ad.transpose(tok.W2, (1, 0))) + tok.b2
        token = ad.matmul(code, P)  # (B, D), equals P^T code per sample
        parts.append(ad.reshape(token, (B, 1, projection.d)))
    return ad.concat(parts, axis=1)


def encode_trial(
    betas: np.ndarray,
    parcellation: Parcellation,
    tokenizers: list[RegionTokenizer],
    projection: LowRankProjection,
) -> np.ndarray:
    """Inference encode of one trial: betas (n_vertices,) -> (R, d_model)."""
    from .world import parcellate

    region_vals = parcellate(np.asarray(betas, dtype=np.float64), parcellation)
    with ad.no_grad():
        block = encode_batch(tokenizers, projection, [v[None, :] for v in region_vals])
    return block.data[0]
