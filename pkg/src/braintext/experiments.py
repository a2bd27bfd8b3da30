"""Zero-shot category holdout and in-silico microstimulation harnesses.

The holdout path removes every trial whose captions mention a category
(whole-word term lists), retrains on the reduced set, then probes the
model on the withheld trials: free captioning scored by nearest caption
centroid, and a three-option forced choice. The microstimulation path
perturbs betas along a localizer t-value mask, betas + beta * mask, and
sweeps the strength while tracking person mentions and token evidence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoding import GenerationConfig, generate, token_evidence
from .metrics import SentenceEmbedder, spearman
from .world import PERSON_CATEGORIES, Trial, choice_question, round_half_up
from .decoder import word_tokens


# Token list used when reading out evidence for people in the decoder's
# next-token distribution.
PERSON_EVIDENCE_TOKENS = (
    "person",
    "people",
    "man",
    "woman",
    "men",
    "women",
    "boy",
    "girl",
)

# Caption mention detection adds plural surface forms plus the category
# nouns that denote people; possessives reduce to the bare noun under
# word_tokens so they need no separate entries.
PERSON_MENTION_TERMS = (
    PERSON_EVIDENCE_TOKENS
    + ("persons", "boys", "girls")
    + PERSON_CATEGORIES
    + tuple(f"{c}s" for c in PERSON_CATEGORIES)
)

DEFAULT_STIM_PROMPT = "What is in this picture?"


@dataclass(frozen=True)
class CategoryFilter:
    category: str
    terms: tuple[str, ...]

    def __post_init__(self):
        if not self.terms:
            raise ValueError("filter needs at least one term")


DEFAULT_FILTERS = {
    "zebra": CategoryFilter("zebra", ("zebra", "zebras")),
    "surfer": CategoryFilter(
        "surfer", ("surf", "surfer", "surfers", "surfing", "surfboard")
    ),
    "airplane": CategoryFilter(
        "airplane", ("airplane", "airplanes", "plane", "planes")
    ),
}


def merge_filters(filters) -> CategoryFilter:
    """Union filter for simultaneous multi-category holdout."""
    filters = list(filters)
    name = "+".join(f.category for f in filters)
    terms = tuple(dict.fromkeys(t for f in filters for t in f.terms))
    return CategoryFilter(name, terms)


def _matches(caption: str, terms) -> bool:
    toks = set(word_tokens(caption))
    return any(t in toks for t in terms)


def trial_matches(trial: Trial, filt: CategoryFilter) -> bool:
    return any(_matches(c, filt.terms) for c in trial.captions)


def holdout_category(trials: list[Trial], filt: CategoryFilter):
    """Partition trials into (kept, held_out) by whole-word caption match.

    Case folding happens in word_tokens. "a plane of glass" is held out by
    the airplane filter; the over-match is a property of whole-word term
    lists and is accepted as such.
    """
    held = [t for t in trials if trial_matches(t, filt)]
    kept = [t for t in trials if not trial_matches(t, filt)]
    if not held:
        raise ValueError(f"filter {filt.category!r} matched no trials")
    if not kept:
        raise ValueError(f"filter {filt.category!r} matched every trial")
    return kept, held


def withheld_tokens(kept: list[Trial], held: list[Trial]) -> set[str]:
    """Tokens appearing only in held-out captions; these leave the reduced
    vocabulary entirely, so the holdout model cannot emit them."""

    def caption_tokens(ts):
        out = set()
        for t in ts:
            for c in t.captions:
                out.update(word_tokens(c))
        return out

    return caption_tokens(held) - caption_tokens(kept)


# ---------------------------------------------------------------------------
# zero-shot captioning evaluation

@dataclass
class ZeroShotCaptionReport:
    category: str
    trial_ids: list[str]
    captions: list[str]
    assignments: list[str]  # per-trial nearest-centroid category
    counts: dict[str, int]
    accuracy: float  # fraction assigned to the trial's own category
    nearest_other: str  # runner-up centroid for the mean held-out embedding
    pca_points: list[list[float]]  # 2-D coords, captions then centroids
    pca_labels: list[str]

    def table(self) -> str:
        lines = ["category\tcount"]
        for cat in sorted(self.counts):
            lines.append(f"{cat}\t{self.counts[cat]}")
        lines.append(f"accuracy\t{self.accuracy:.4f}")
        return "\n".join(lines)


def category_centroids(
    embedder: SentenceEmbedder, refs_by_category: dict[str, list[str]]
) -> dict[str, np.ndarray]:
    out = {}
    for cat, refs in refs_by_category.items():
        vecs = np.stack([embedder.embed(r) for r in refs])
        c = vecs.mean(axis=0)
        n = np.linalg.norm(c)
        out[cat] = c / n if n > 0 else c
    return out


def _pca_2d(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for i in range(comps.shape[0]):  # deterministic sign, largest coef positive
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T


def zeroshot_caption_eval(
    model,
    held_out: list[Trial],
    category: str,
    refs_by_category: dict[str, list[str]],
    embedder: SentenceEmbedder,
    gen_cfg: GenerationConfig,
    prompt: str = "Give a concise and descriptive caption of this image.",
) -> ZeroShotCaptionReport:
    """Caption withheld trials with the holdout model and assign each
    caption to its nearest ground-truth category centroid by cosine.

    The embedder must come from the full-vocabulary base model so that
    reference captions containing withheld tokens still embed; the holdout
    model only produces the captions.

    A multi-category holdout passes its components joined with "+"; each
    trial is then scored against its own scene category.
    """
    components = category.split("+")
    missing = [c for c in components if c not in refs_by_category]
    if missing:
        raise ValueError(f"no reference captions for categories {missing!r}")
    centroids = category_centroids(embedder, refs_by_category)
    cats = sorted(centroids)
    cmat = np.stack([centroids[c] for c in cats])
    captions, assignments = [], []
    vecs = []
    for t in held_out:
        text = generate(model, model.encode_brain(t.betas), prompt, gen_cfg)
        captions.append(text)
        v = embedder.embed(text)
        vecs.append(v)
        sims = cmat @ v  # rows unit or zero, v unit or zero
        assignments.append(cats[int(np.argmax(sims))])
    counts = {c: assignments.count(c) for c in cats}
    n_correct = sum(a == t.scene.category for a, t in zip(assignments, held_out))
    accuracy = n_correct / len(held_out)
    mean_vec = np.mean(np.stack(vecs), axis=0)
    order = np.argsort(-(cmat @ mean_vec), kind="stable")
    ranked = [cats[int(i)] for i in order]
    nearest_other = next(c for c in ranked if c not in components)
    all_points = np.stack(vecs + [centroids[c] for c in cats])
    coords = _pca_2d(all_points)
    labels = [f"caption:{t.trial_id}" for t in held_out] + [f"centroid:{c}" for c in cats]
    return ZeroShotCaptionReport(
        category=category,
        trial_ids=[t.trial_id for t in held_out],
        captions=captions,
        assignments=assignments,
        counts=counts,
        accuracy=accuracy,
        nearest_other=nearest_other,
        pca_points=[[float(x), float(y)] for x, y in coords],
        pca_labels=labels,
    )


# ---------------------------------------------------------------------------
# forced choice

@dataclass
class ChoiceReport:
    options: tuple[str, ...]
    trial_ids: list[str]
    truths: list[str]
    answers: list[str]
    parsed: list[str]  # option name or "non_compliant"
    counts: dict[str, int]
    n_correct: int
    n_compliant: int

    @property
    def accuracy(self) -> float:
        """Correct over compliant; trials the parser cannot place are
        excluded from the denominator, matching hand-categorized scoring."""
        return self.n_correct / self.n_compliant if self.n_compliant else 0.0


# Option order of the canonical three-way probe prompt.
DEFAULT_CHOICE_OPTIONS = ("zebra", "airplane", "surfer")


def choice_prompt(options) -> str:
    return choice_question(options)


def parse_choice(answer: str, options, filters=DEFAULT_FILTERS) -> str:
    """First whole-word occurrence of any option term wins."""
    term_to_option = {}
    for opt in options:
        terms = {opt}
        if opt in filters:
            terms |= set(filters[opt].terms)
        for term in terms:
            term_to_option.setdefault(term, opt)
    for tok in word_tokens(answer):
        if tok in term_to_option:
            return term_to_option[tok]
    return "non_compliant"


def choice_experiment(
    model,
    trials: list[Trial],
    options,
    gen_cfg: GenerationConfig,
    truth_of=None,
    filters=DEFAULT_FILTERS,
) -> ChoiceReport:
    """Forced choice over the withheld category and two speakable options.

    truth_of maps a trial to the option it should elicit; by default the
    trial's category name is used and must be one of the options.
    """
    options = tuple(options)
    if truth_of is None:
        truth_of = lambda t: t.scene.category
    truths, answers, parsed = [], [], []
    for t in trials:
        truth = truth_of(t)
        if truth not in options:
            raise ValueError(f"trial {t.trial_id} truth {truth!r} not among options")
        ans = generate(model, model.encode_brain(t.betas), choice_prompt(options), gen_cfg)
        truths.append(truth)
        answers.append(ans)
        parsed.append(parse_choice(ans, options, filters))
    counts = {opt: parsed.count(opt) for opt in options}
    counts["non_compliant"] = parsed.count("non_compliant")
    n_compliant = len(parsed) - counts["non_compliant"]
    n_correct = sum(1 for p, tr in zip(parsed, truths) if p == tr)
    return ChoiceReport(
        options=options,
        trial_ids=[t.trial_id for t in trials],
        truths=truths,
        answers=answers,
        parsed=parsed,
        counts=counts,
        n_correct=n_correct,
        n_compliant=n_compliant,
    )


# ---------------------------------------------------------------------------
# microstimulation

@dataclass(frozen=True)
class StimMask:
    weights: np.ndarray  # (n_vertices,) t-values inside the mask, 0 outside
    fraction: float
    source: str

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.weights))


def build_stim_mask(t_values: np.ndarray, fraction: float, source: str = "localizer") -> StimMask:
    """Keep the t-values of the round(fraction * n) largest-t vertices.

    Rounding is half-up. Ties at the cut go to the lower vertex index.
    From 327,684 vertices this yields 3,277 at 1%; at 5% it yields 16,384,
    one fewer than the count the mask construction is calibrated against,
    and the discrepancy is surfaced rather than patched.
    """
    t = np.asarray(t_values, dtype=np.float64)
    if t.ndim != 1:
        raise ValueError("t_values must be a vector")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    k = int(round_half_up(fraction * len(t)))
    k = max(k, 1)
    order = np.argsort(-t, kind="stable")  # stable: equal t -> lower index first
    weights = np.zeros_like(t)
    chosen = order[:k]
    weights[chosen] = t[chosen]
    return StimMask(weights=weights, fraction=float(fraction), source=source)


def stimulate(betas: np.ndarray, mask: StimMask, beta: float) -> np.ndarray:
    """betas + beta * mask.weights, elementwise."""
    b = np.asarray(betas, dtype=np.float64)
    if b.shape != mask.weights.shape:
        raise ValueError(
            f"betas shape {b.shape} does not match mask shape {mask.weights.shape}"
        )
    return b + beta * mask.weights


DEFAULT_BETA_GRID = (-5.0, -1.0, -0.5, -0.25, -0.15, 0.0, 0.15, 0.25, 0.5, 1.0, 5.0)


def mentions_person(text: str, terms=PERSON_MENTION_TERMS) -> bool:
    toks = set(word_tokens(text))
    return any(t in toks for t in terms)


@dataclass
class SweepResult:
    grid: list[float]
    trial_ids: list[str]
    mention_rate: list[float]  # per grid point
    mean_evidence: list[float]  # per grid point, mean aggregate log evidence
    captions: list[list[str]]  # [grid point][trial]
    mask_fraction: float
    mask_active: int
    prompt: str

    def __post_init__(self):
        assert all(0.0 <= r <= 1.0 for r in self.mention_rate)

    def table(self) -> str:
        lines = ["beta\tmention_rate\tmean_evidence"]
        for b, r, e in zip(self.grid, self.mention_rate, self.mean_evidence):
            lines.append(f"{b:g}\t{r:.4f}\t{e:.6f}")
        return "\n".join(lines)


def select_stim_trials(trials: list[Trial], n_each: int = 20):
    """First n_each trials without and with a person, in dataset order.

    Trials whose category itself denotes a person are skipped: their
    captions mention people regardless of the bystander flag, so they can
    anchor neither a person-free nor a person-suppressible group.
    """
    eligible = [t for t in trials if t.scene.category not in PERSON_CATEGORIES]
    absent = [t for t in eligible if not t.scene.has_person][:n_each]
    present = [t for t in eligible if t.scene.has_person][:n_each]
    return absent, present


def microstim_sweep(
    model,
    trials: list[Trial],
    mask: StimMask,
    grid=DEFAULT_BETA_GRID,
    prompt: str = DEFAULT_STIM_PROMPT,
    person_terms=PERSON_MENTION_TERMS,
    gen_cfg: GenerationConfig | None = None,
    evidence_tokens=PERSON_EVIDENCE_TOKENS,
) -> SweepResult:
    """Caption each trial at every stimulation strength on the grid.

    Per grid point: the fraction of captions mentioning a person term and
    the mean log evidence that the greedy decode assigns to the evidence
    tokens. beta = 0 reproduces the unperturbed model bit for bit.
    """
    if gen_cfg is None:
        gen_cfg = GenerationConfig()
    if not trials:
        raise ValueError("no trials given")
    grid = [float(b) for b in grid]
    watch = [t for t in evidence_tokens if t in model.vocab]
    mention_rate, mean_evidence, captions = [], [], []
    for b in grid:
        caps, evidences = [], []
        for t in trials:
            perturbed = stimulate(t.betas, mask, b)
            brain = model.encode_brain(perturbed)
            caps.append(generate(model, brain, prompt, gen_cfg))
            trace = token_evidence(model, brain, prompt, watch, gen_cfg)
            evidences.append(trace.aggregate_log)
        captions.append(caps)
        mention_rate.append(
            sum(mentions_person(c, person_terms) for c in caps) / len(caps)
        )
        mean_evidence.append(float(np.mean(evidences)))
    return SweepResult(
        grid=grid,
        trial_ids=[t.trial_id for t in trials],
        mention_rate=mention_rate,
        mean_evidence=mean_evidence,
        captions=captions,
        mask_fraction=mask.fraction,
        mask_active=mask.n_active,
        prompt=prompt,
    )


def sweep_spearman(result: SweepResult, side: str) -> float:
    """Correlation between mention rate and stimulation strength.

    side "excitatory": rho(mention rate, beta) over beta >= 0.
    side "inhibitory": rho(mention rate, |beta|) over beta <= 0; driving a
    person mask negative should suppress mentions, so rho < 0 there.
    A flat mention-rate series has no rank correlation; that comes back
    as nan, not as an exception.
    """
    g = np.asarray(result.grid)
    r = np.asarray(result.mention_rate)
    if side == "excitatory":
        keep = g >= 0
        x = g[keep]
    elif side == "inhibitory":
        keep = g <= 0
        x = np.abs(g[keep])
    else:
        raise ValueError("side must be 'excitatory' or 'inhibitory'")
    try:
        return spearman(x, r[keep])
    except ValueError:
        return float("nan")
