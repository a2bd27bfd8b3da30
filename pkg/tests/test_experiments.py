"""Holdout partitioning, forced-choice parsing, and stimulation masks.

Generation-dependent paths run against a scripted stand-in for the decoder
(the real generate function is monkeypatched) so assignment logic, choice
scoring, and compliance accounting are exercised with exact expectations.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from braintext.decoder import Vocabulary
from braintext.decoding import GenerationConfig
from braintext.experiments import (
    DEFAULT_BETA_GRID,
    DEFAULT_CHOICE_OPTIONS,
    DEFAULT_FILTERS,
    CategoryFilter,
    SweepResult,
    build_stim_mask,
    choice_experiment,
    choice_prompt,
    holdout_category,
    mentions_person,
    merge_filters,
    parse_choice,
    select_stim_trials,
    stimulate,
    sweep_spearman,
    trial_matches,
    withheld_tokens,
    zeroshot_caption_eval,
)
from braintext.metrics import SentenceEmbedder
from braintext.world import WorldConfig, corpus_texts, generate_world

WORLD = WorldConfig(
    n_vertices=128,
    n_regions=4,
    latent_dim=6,
    n_trials=160,
    shared_fraction=0.2,
    test_count=16,
    seed=21,
)


@pytest.fixture(scope="module")
def trials():
    return generate_world(WORLD)[1]


@pytest.fixture(scope="module")
def embedder(trials):
    # identity rows turn cosine into bag-of-words overlap, which keeps the
    # centroid assignments in this file exactly predictable
    vocab = Vocabulary.build(corpus_texts(trials))
    return SentenceEmbedder(np.eye(len(vocab)), vocab)


class ScriptedModel:
    """encode_brain hands betas through; the patched generate reads them."""

    def __init__(self, script: dict[bytes, str]):
        self.script = script

    def encode_brain(self, betas):
        return np.asarray(betas)


def patch_generate(monkeypatch, model):
    def fake_generate(m, brain, prompt, cfg):
        return model.script[np.asarray(brain).tobytes()]

    monkeypatch.setattr("braintext.experiments.generate", fake_generate)


# ---------------------------------------------------------------------------
# holdout partitioning

def test_holdout_partitions_on_whole_word_terms(trials):
    filt = DEFAULT_FILTERS["zebra"]
    kept, held = holdout_category(trials, filt)
    assert len(kept) + len(held) == len(trials)
    assert held and kept
    for t in held:
        assert any("zebra" in c.lower() for c in t.captions)
    for t in kept:
        for c in t.captions:
            assert "zebra" not in c.lower()


def test_holdout_is_a_surface_match(trials):
    # "a plane of glass" trips the airplane filter: term lists match words,
    # not senses
    t = replace(trials[0], captions=["A plane of glass in a room."])
    assert trial_matches(t, DEFAULT_FILTERS["airplane"])
    assert not trial_matches(t, DEFAULT_FILTERS["zebra"])


def test_holdout_rejects_degenerate_filters(trials):
    with pytest.raises(ValueError):
        holdout_category(trials, CategoryFilter("none", ("qqqq",)))
    with pytest.raises(ValueError):
        holdout_category(trials, CategoryFilter("all", ("a", "in")))
    with pytest.raises(ValueError):
        CategoryFilter("empty", ())


def test_withheld_tokens_leave_reduced_vocab(trials):
    kept, held = holdout_category(trials, DEFAULT_FILTERS["zebra"])
    gone = withheld_tokens(kept, held)
    assert "zebra" in gone
    kept_tokens = {
        tok for t in kept for c in t.captions for tok in c.lower().split()
    }
    assert "zebra" not in kept_tokens


def test_merge_filters_unions_terms():
    merged = merge_filters([DEFAULT_FILTERS["zebra"], DEFAULT_FILTERS["airplane"]])
    assert merged.category == "zebra+airplane"
    assert merged.terms[0] == "zebra" and "plane" in merged.terms
    assert len(merged.terms) == len(set(merged.terms))


# ---------------------------------------------------------------------------
# zero-shot captioning against a scripted decoder

def on_preference(ts):
    """Trials sitting in their category's modal setting; off-setting captions
    legitimately drift toward the category that owns that setting."""
    from collections import Counter

    pref = Counter(t.scene.setting for t in ts).most_common(1)[0][0]
    return [t for t in ts if t.scene.setting == pref]


def test_zeroshot_assigns_captions_to_nearest_centroid(trials, embedder, monkeypatch):
    by_cat = {}
    for t in trials:
        by_cat.setdefault(t.scene.category, []).append(t)
    cat_a, cat_b = "zebra", "pizza"
    held = on_preference(by_cat[cat_a])[:3] + on_preference(by_cat[cat_b])[:2]
    refs = {c: [cap for t in ts for cap in t.captions] for c, ts in by_cat.items()}
    script = {t.betas.tobytes(): t.captions[0] for t in held}
    # one zebra trial drifts: the model describes it as pizza
    drifter = held[0]
    script[drifter.betas.tobytes()] = on_preference(by_cat[cat_b])[3].captions[0]
    model = ScriptedModel(script)
    patch_generate(monkeypatch, model)
    rep = zeroshot_caption_eval(
        model, held, cat_a, refs, embedder, GenerationConfig()
    )
    assert rep.assignments == [cat_b, cat_a, cat_a, cat_b, cat_b]
    # per-trial scoring against each trial's own category: only the drifter misses
    assert rep.accuracy == pytest.approx(4 / 5)
    assert rep.counts[cat_a] == 2 and rep.counts[cat_b] == 3
    assert rep.nearest_other != cat_a
    assert len(rep.pca_points) == len(held) + len(refs)
    assert rep.pca_labels[0].startswith("caption:")
    assert rep.pca_labels[-1].startswith("centroid:")


def test_zeroshot_multi_category_scores_each_trial_against_its_own(
    trials, embedder, monkeypatch
):
    by_cat = {}
    for t in trials:
        by_cat.setdefault(t.scene.category, []).append(t)
    held = on_preference(by_cat["zebra"])[:2] + on_preference(by_cat["airplane"])[:2]
    refs = {c: [cap for t in ts for cap in t.captions] for c, ts in by_cat.items()}
    model = ScriptedModel({t.betas.tobytes(): t.captions[0] for t in held})
    patch_generate(monkeypatch, model)
    rep = zeroshot_caption_eval(
        model, held, "zebra+airplane", refs, embedder, GenerationConfig()
    )
    assert rep.accuracy == 1.0
    assert rep.nearest_other not in ("zebra", "airplane")
    with pytest.raises(ValueError):
        zeroshot_caption_eval(
            model, held, "zebra+unicorn", refs, embedder, GenerationConfig()
        )


# ---------------------------------------------------------------------------
# forced choice

def test_choice_prompt_is_frozen():
    assert DEFAULT_CHOICE_OPTIONS == ("zebra", "airplane", "surfer")
    assert (
        choice_prompt(DEFAULT_CHOICE_OPTIONS)
        == "What is in this image? Answer with one noun, chosen from "
        "[zebra, airplane, surfer]"
    )


def test_parse_choice_first_whole_word_wins():
    opts = DEFAULT_CHOICE_OPTIONS
    assert parse_choice("The scene features a zebra.", opts) == "zebra"
    assert parse_choice("There is no zebra airplane or surfer here.", opts) == "zebra"
    assert parse_choice("I cannot tell.", opts) == "non_compliant"
    assert parse_choice("A plane flying high.", opts) == "airplane"  # filter alias
    assert parse_choice("Surfing the waves!", opts) == "surfer"
    assert parse_choice("ZEBRA", opts) == "zebra"
    assert parse_choice("zebrafish", opts) == "non_compliant"  # whole words only
    assert parse_choice("a pizza slice", ("pizza", "zebra")) == "pizza"


def test_choice_experiment_counts_compliance(trials, monkeypatch):
    eligible = [t for t in trials if t.scene.category in ("zebra", "airplane")][:4]
    script = {}
    answers = [
        "The scene features a zebra.",
        "I cannot tell.",
        "An airplane.",
        "a zebra i think",
    ]
    for t, a in zip(eligible, answers):
        script[t.betas.tobytes()] = a
    model = ScriptedModel(script)
    patch_generate(monkeypatch, model)
    rep = choice_experiment(
        model, eligible, DEFAULT_CHOICE_OPTIONS, GenerationConfig()
    )
    assert rep.counts["non_compliant"] == 1
    assert rep.n_compliant == 3
    parsed_truth_hits = sum(
        1 for p, tr in zip(rep.parsed, rep.truths) if p == tr
    )
    assert rep.n_correct == parsed_truth_hits
    assert rep.accuracy == rep.n_correct / 3


def test_choice_experiment_rejects_offlist_truth(trials, monkeypatch):
    t = next(t for t in trials if t.scene.category == "pizza")
    model = ScriptedModel({t.betas.tobytes(): "a pizza"})
    patch_generate(monkeypatch, model)
    with pytest.raises(ValueError):
        choice_experiment(model, [t], DEFAULT_CHOICE_OPTIONS, GenerationConfig())


# ---------------------------------------------------------------------------
# stimulation masks

def test_mask_cardinality_at_suggested_fractions():
    rng = np.random.default_rng(3)
    t = rng.normal(size=327_684)
    assert build_stim_mask(t, 0.01).n_active == 3_277
    # one fewer than the quoted 16,385; round-half-up of 16384.2 says so
    assert build_stim_mask(t, 0.05).n_active == 16_384


def test_mask_keeps_t_values_and_breaks_ties_low_index():
    mask = build_stim_mask(np.array([1.0, 3.0, 3.0, 5.0]), 0.5)
    assert mask.weights.tolist() == [0.0, 3.0, 0.0, 5.0]
    assert mask.n_active == 2
    with pytest.raises(ValueError):
        build_stim_mask(np.zeros((2, 2)), 0.1)
    with pytest.raises(ValueError):
        build_stim_mask(np.zeros(4), 0.0)
    with pytest.raises(ValueError):
        build_stim_mask(np.zeros(4), 1.0)


def test_stimulate_is_exact_additive_perturbation():
    rng = np.random.default_rng(8)
    betas = rng.normal(size=64)
    mask = build_stim_mask(rng.normal(size=64), 0.25)
    assert np.array_equal(stimulate(betas, mask, 0.0), betas)  # bit-for-bit
    assert np.array_equal(stimulate(betas, mask, 2.0), betas + 2.0 * mask.weights)
    assert np.allclose(
        stimulate(stimulate(betas, mask, 1.0), mask, 1.0),
        stimulate(betas, mask, 2.0),
        atol=1e-12,
    )
    with pytest.raises(ValueError):
        stimulate(betas[:32], mask, 1.0)


def test_select_stim_trials_skips_person_categories(trials):
    absent, present = select_stim_trials(trials, n_each=10)
    assert absent and present
    for t in absent + present:
        assert t.scene.category not in ("surfer", "skater")
    assert all(not t.scene.has_person for t in absent)
    assert all(t.scene.has_person for t in present)
    order = {t.trial_id: i for i, t in enumerate(trials)}
    idx = [order[t.trial_id] for t in absent]
    assert idx == sorted(idx)


def test_mentions_person_covers_category_nouns():
    assert mentions_person("A surfer in a blue ocean.")
    assert mentions_person("Two skaters at a sunny park.")
    assert mentions_person("a man standing nearby")
    assert mentions_person("three pizzas, with a woman.")
    assert not mentions_person("a zebra in a dry savanna.")
    assert not mentions_person("")


# ---------------------------------------------------------------------------
# sweep statistics

def make_sweep(rates):
    return SweepResult(
        grid=list(DEFAULT_BETA_GRID),
        trial_ids=["t0"],
        mention_rate=list(rates),
        mean_evidence=[0.0] * len(rates),
        captions=[["x"]] * len(rates),
        mask_fraction=0.01,
        mask_active=1,
        prompt="What is in this picture?",
    )


def test_sweep_spearman_signs_and_nan():
    exc = make_sweep([0, 0, 0, 0, 0, 0, 0.2, 0.4, 0.6, 0.8, 1.0])
    assert sweep_spearman(exc, "excitatory") == 1.0
    assert np.isnan(sweep_spearman(exc, "inhibitory"))  # flat negative side
    inh = make_sweep([0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
    assert sweep_spearman(inh, "inhibitory") == -1.0
    assert np.isnan(sweep_spearman(inh, "excitatory"))
    with pytest.raises(ValueError):
        sweep_spearman(exc, "sideways")


def test_sweep_result_rejects_out_of_range_rates():
    with pytest.raises(AssertionError):
        make_sweep([0.0] * 10 + [1.5])
