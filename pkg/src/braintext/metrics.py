"""Scoring and statistics for decoded text.

The sentence embedder is deliberately simple: a stopword-filtered mean of
the base decoder's token embeddings, unit-normalized. Caption scores are
clamped cosines against reference captions. Welch and KS statistics are
implemented from first principles (continued-fraction incomplete beta for
the t survival function) so the library carries no stats dependency; the
test suite cross-checks them against independent oracles.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .decoder import SPECIALS, Vocabulary, word_tokens
from .rng import substream

DEFAULT_STOPWORDS = frozenset(
    {
        "a", "an", "the", "in", "on", "at", "of", "and", "or", "to", "with",
        "is", "are", "was", "were", "be", "this", "that", "these", "those",
        "there", "it", "its",
        ".", ",", "?", "!", ";", ":",
    }
)


class SentenceEmbedder:
    """Mean token embedding of content words, L2-normalized.

    Empty or all-stopword text embeds to the zero vector; callers can
    detect that by norm. Unknown words are skipped rather than mapped to
    the UNK row, which would inject a shared spurious direction.
    """

    def __init__(
        self,
        embedding: np.ndarray,
        vocab: Vocabulary,
        stopwords=DEFAULT_STOPWORDS,
    ):
        self.embedding = np.asarray(embedding, dtype=np.float64)
        if self.embedding.shape[0] != len(vocab):
            raise ValueError("embedding row count does not match vocabulary")
        self.vocab = vocab
        self.stopwords = frozenset(stopwords) | set(SPECIALS)

    def embed(self, text: str) -> np.ndarray:
        ids = [
            self.vocab.index[t]
            for t in word_tokens(text)
            if t not in self.stopwords and t in self.vocab.index
        ]
        if not ids:
            return np.zeros(self.embedding.shape[1])
        v = self.embedding[ids].mean(axis=0)
        norm = np.linalg.norm(v)
        if norm == 0.0:
            return np.zeros_like(v)
        return v / norm


def caption_score(
    embedder: SentenceEmbedder,
    candidate: str,
    references: list[str],
    weight: float = 1.0,
) -> float:
    """Best clamped cosine against any reference, scaled by weight."""
    if not references:
        raise ValueError("need at least one reference caption")
    c = embedder.embed(candidate)
    if not np.any(c):
        return 0.0
    best = 0.0
    for ref in references:
        r = embedder.embed(ref)
        if not np.any(r):
            continue
        best = max(best, float(c @ r))
    return max(0.0, best) * weight


def reference_consistency(embedder: SentenceEmbedder, references: list[str]) -> float:
    """Mean pairwise score among references: the human-consistency ceiling."""
    if len(references) < 2:
        return 1.0
    vals = []
    for i in range(len(references)):
        for j in range(i + 1, len(references)):
            vals.append(
                caption_score(embedder, references[i], [references[j]])
            )
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# surface-overlap metrics

def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_scores(candidate: str, references: list[str], max_n: int = 4) -> list[float]:
    """BLEU-1..max_n: clipped precision, geometric mean, brevity penalty.

    The effective reference length is the closest to the candidate length
    (ties to the shorter). A zero precision anywhere zeroes that order.
    """
    cand = word_tokens(candidate)
    refs = [word_tokens(r) for r in references]
    if not refs:
        raise ValueError("need at least one reference")
    c = len(cand)
    if c == 0:
        return [0.0] * max_n
    r = min((abs(len(t) - c), len(t)) for t in refs)[1]
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    precisions = []
    for n in range(1, max_n + 1):
        cand_counts = _ngrams(cand, n)
        total = sum(cand_counts.values())
        if total == 0:
            precisions.append(0.0)
            continue
        clipped = 0
        for gram, count in cand_counts.items():
            best = max(_ngrams(t, n).get(gram, 0) for t in refs)
            clipped += min(count, best)
        precisions.append(clipped / total)
    out = []
    for n in range(1, max_n + 1):
        ps = precisions[:n]
        if min(ps) <= 0.0:
            out.append(0.0)
        else:
            out.append(bp * math.exp(sum(math.log(p) for p in ps) / n))
    return out


def _lcs_len(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, references: list[str], beta: float = 1.2) -> float:
    """LCS-based F measure, best reference wins."""
    cand = word_tokens(candidate)
    if not references:
        raise ValueError("need at least one reference")
    if not cand:
        return 0.0
    best = 0.0
    for ref in references:
        rtok = word_tokens(ref)
        if not rtok:
            continue
        lcs = _lcs_len(cand, rtok)
        if lcs == 0:
            continue
        p = lcs / len(cand)
        r = lcs / len(rtok)
        f = (1 + beta * beta) * p * r / (r + beta * beta * p)
        best = max(best, f)
    return best


# ---------------------------------------------------------------------------
# statistics

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (Lentz)."""
    MAXIT, EPS, FPMIN = 300, 3e-16, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < FPMIN:
        d = FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < EPS:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log(1.0 - x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t with df degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    x = df / (df + t * t)
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x)
    return tail if t >= 0 else 1.0 - tail


@dataclass
class WelchResult:
    t: float
    dof: float
    p: float  # one-sided, H1: mean(a) > mean(b)


def welch_one_sided(a, b) -> WelchResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n1, n2 = len(a), len(b)
    if n1 < 2 or n2 < 2:
        raise ValueError("welch test needs at least two samples per group")
    v1, v2 = a.var(ddof=1), b.var(ddof=1)
    se1, se2 = v1 / n1, v2 / n2
    denom = se1 + se2
    if denom == 0.0:
        raise ValueError("zero variance in both samples")
    t = (a.mean() - b.mean()) / math.sqrt(denom)
    dof = denom * denom / (se1 * se1 / (n1 - 1) + se2 * se2 / (n2 - 1))
    return WelchResult(t=float(t), dof=float(dof), p=student_t_sf(float(t), float(dof)))


def ks_test(a, b) -> tuple[float, float]:
    """Two-sample KS: D = sup |F_a - F_b| and its asymptotic p value."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    n1, n2 = len(a), len(b)
    if n1 < 1 or n2 < 1:
        raise ValueError("ks test needs nonempty samples")
    grid = np.concatenate([a, b])
    cdf1 = np.searchsorted(a, grid, side="right") / n1
    cdf2 = np.searchsorted(b, grid, side="right") / n2
    d = float(np.abs(cdf1 - cdf2).max())
    ne = n1 * n2 / (n1 + n2)
    lam = (math.sqrt(ne) + 0.12 + 0.11 / math.sqrt(ne)) * d
    s = 0.0
    for j in range(1, 101):
        term = 2.0 * (-1.0) ** (j - 1) * math.exp(-2.0 * j * j * lam * lam)
        s += term
        if abs(term) < 1e-16:
            break
    return d, float(min(1.0, max(0.0, s)))


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need two equal-length 1-d samples of size >= 2")
    rx, ry = _average_ranks(x), _average_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        raise ValueError("constant sample has no rank correlation")
    return float(rx @ ry) / denom


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    sorted_v = v[order]
    while i < len(v):
        j = i
        while j + 1 < len(v) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


# ---------------------------------------------------------------------------
# baselines and report

def derangement(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform random cyclic permutation (Sattolo): no fixed points for n >= 2."""
    if n < 2:
        raise ValueError("cannot derange fewer than two items")
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(i))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def shuffled_baseline(
    candidates: list[str],
    reference_lists: list[list[str]],
    score_fn,
    n_permutations: int,
    seed: int,
) -> np.ndarray:
    """Scores of candidates against deranged reference pairings, (n_perm, n)."""
    if len(candidates) != len(reference_lists):
        raise ValueError("candidates and references must align")
    if n_permutations < 1:
        raise ValueError("need at least one permutation")
    rng = substream(seed, "baseline.shuffle")
    n = len(candidates)
    out = np.zeros((n_permutations, n))
    for p in range(n_permutations):
        perm = derangement(rng, n)
        for i in range(n):
            out[p, i] = score_fn(candidates[i], reference_lists[perm[i]])
    return out


_COUNT_TOKENS = {
    "one": 1, "two": 2, "three": 3, "four": 4,
    "1": 1, "2": 2, "3": 3, "4": 4,
}


def parse_count(text: str):
    """First count word (one..four, 1..4) in the text, or None."""
    for tok in word_tokens(text):
        if tok in _COUNT_TOKENS:
            return _COUNT_TOKENS[tok]
    return None


def numerosity_accuracy(answers: list[str], truths: list[int]) -> float:
    if len(answers) != len(truths):
        raise ValueError("answers and truths must align")
    if not answers:
        raise ValueError("empty numerosity sample")
    hits = sum(1 for a, t in zip(answers, truths) if parse_count(a) == t)
    return hits / len(answers)


def distribution_mode(scores, rule: str = "freedman-diaconis") -> float:
    """Histogram mode; bin width from the Freedman-Diaconis rule."""
    x = np.sort(np.asarray(scores, dtype=np.float64))
    if len(x) == 0:
        raise ValueError("empty sample has no mode")
    if rule != "freedman-diaconis":
        raise ValueError(f"unknown binning rule {rule!r}")
    if x[0] == x[-1]:
        return float(x[0])
    q75, q25 = np.percentile(x, [75, 25])
    iqr = q75 - q25
    width = 2.0 * iqr / len(x) ** (1.0 / 3.0)
    if width <= 0.0:
        width = (x[-1] - x[0]) / max(1, int(math.sqrt(len(x))))
    n_bins = max(1, int(math.ceil((x[-1] - x[0]) / width)))
    counts, edges = np.histogram(x, bins=n_bins, range=(x[0], x[-1]))
    best = int(counts.argmax())
    return float((edges[best] + edges[best + 1]) / 2.0)


@dataclass
class ScoreReport:
    """Everything the eval stage measured for one model on one split."""

    label: str
    trial_ids: list[str]
    caption_scores: list[float]
    qa_scores: list[float]
    baseline_caption_scores: list[float]
    baseline_qa_scores: list[float]
    caption_mode: float
    consistency_ceiling: float
    percent_of_ceiling: float
    bleu: list[float]
    rouge_l: float
    numerosity_accuracy: float
    welch: dict = field(default_factory=dict)  # name -> {t, dof, p}
    control_caption_scores: list[float] | None = None
    control_qa_scores: list[float] | None = None
    control_numerosity_accuracy: float | None = None
    numerosity_ks: dict | None = None  # {d, p} model vs control predictions
    flags: list[str] = field(default_factory=list)

    def summary_table(self) -> str:
        rows = [
            ("trials", f"{len(self.trial_ids)}"),
            ("caption score mean", f"{np.mean(self.caption_scores):.4f}"),
            ("caption score mode", f"{self.caption_mode:.4f}"),
            ("consistency ceiling", f"{self.consistency_ceiling:.4f}"),
            ("percent of ceiling", f"{self.percent_of_ceiling:.2f}"),
            ("qa score mean", f"{np.mean(self.qa_scores):.4f}"),
            ("baseline caption mean", f"{np.mean(self.baseline_caption_scores):.4f}"),
            ("baseline qa mean", f"{np.mean(self.baseline_qa_scores):.4f}"),
            ("bleu-1..4", " ".join(f"{b:.3f}" for b in self.bleu)),
            ("rouge-l", f"{self.rouge_l:.4f}"),
            ("numerosity acc", f"{self.numerosity_accuracy:.4f}"),
        ]
        if self.control_caption_scores is not None:
            rows.append(
                ("control caption mean", f"{np.mean(self.control_caption_scores):.4f}")
            )
        if self.control_qa_scores is not None:
            rows.append(("control qa mean", f"{np.mean(self.control_qa_scores):.4f}"))
        for name, res in sorted(self.welch.items()):
            rows.append(
                (f"welch {name}", f"t={res['t']:.3f} dof={res['dof']:.1f} p={res['p']:.3e}")
            )
        width = max(len(r[0]) for r in rows) + 2
        lines = [f"== score report: {self.label} =="]
        lines += [f"{name:<{width}}{value}" for name, value in rows]
        if self.flags:
            lines.append("flags: " + "; ".join(self.flags))
        return "\n".join(lines)
