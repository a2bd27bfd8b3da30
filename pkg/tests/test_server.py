"""HTTP probe service tests against a micro checkpoint.

Every behavioural claim is cross-checked against the library call the
endpoint wraps: /api/ask against answer_question, /api/sweep against
stimulate + generate + token_evidence, masks against a recomputed
localizer.  The service must be a thin, deterministic shell.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from types import SimpleNamespace

import numpy as np
import pytest
from fastapi.testclient import TestClient

from braintext import __version__, pipeline
from braintext.decoder import word_tokens
from braintext.decoding import generate, token_evidence
from braintext.experiments import (
    PERSON_EVIDENCE_TOKENS,
    build_stim_mask,
    mentions_person,
    stimulate,
)
from braintext.world import localizer_ttest
from braintext.metrics import caption_score
from braintext.server import build_app


@pytest.fixture(scope="module")
def served(demo_run):
    ckpt = pipeline.checkpoint_path(demo_run.out_dir, "model")
    model, cfg, ck = pipeline.load_model_file(ckpt)
    world_cfg, _, trials = pipeline.load_world(demo_run)
    groups = pipeline.split_trials(trials, world_cfg)
    app = build_app(ckpt, pipeline.dataset_path(demo_run.out_dir))
    with TestClient(app) as client:
        yield SimpleNamespace(
            client=client,
            model=model,
            cfg=cfg,
            ck=ck,
            trials=trials,
            groups=groups,
        )


def _probe(served):
    """A test trial plus its first dataset question."""
    trial = served.groups["test"][0]
    return trial, trial.qa_pairs[0][0]


def test_health_reports_run_shape(served):
    r = served.client.get("/api/health")
    assert r.status_code == 200
    body = r.json()
    assert body["status"] == "ok"
    assert body["version"] == __version__
    assert body["checkpoint_hash"] == served.ck.hash
    assert len(body["checkpoint_hash"]) == 64
    assert body["phase"] == "phase2"
    assert body["n_trials"] == len(served.trials)
    assert body["n_test_trials"] == len(served.groups["test"])
    assert body["vocab_size"] == len(served.model.vocab)
    assert body["n_brain_tokens"] == served.model.n_brain
    assert body["beta_grid"] == list(served.cfg.experiments.beta_grid)


def test_trials_lists_test_split_with_revealable_truth(served):
    r = served.client.get("/api/trials")
    assert r.status_code == 200
    rows = r.json()["trials"]
    assert [row["trial_id"] for row in rows] == [
        t.trial_id for t in served.groups["test"]
    ]
    trial = served.groups["test"][0]
    row = rows[0]
    assert row["caption_preview"] == trial.captions[0]
    assert row["questions"] == [q for q, _ in trial.qa_pairs]
    truth = row["ground_truth"]
    assert truth["revealable"] is True
    assert truth["category"] == trial.scene.category
    assert truth["count"] == trial.scene.count
    assert truth["setting"] == trial.scene.setting
    assert truth["has_person"] == trial.scene.has_person
    assert truth["captions"] == list(trial.captions)


def test_masks_match_recomputed_localizer(served):
    r = served.client.get("/api/masks")
    assert r.status_code == 200
    body = r.json()
    rows = {m["mask_id"]: m for m in body["masks"]}
    assert sorted(rows) == ["face-top1pct", "face-top5pct"]
    localizer = localizer_ttest(served.groups["train"])
    for fraction in (0.01, 0.05):
        mask = build_stim_mask(localizer.t_values, fraction, source="face-localizer")
        row = rows[f"face-top{100 * fraction:g}pct"]
        assert row["fraction"] == fraction
        assert row["n_active"] == mask.n_active
        assert row["source"] == "face-localizer"
    assert body["default_evidence_tokens"] == list(PERSON_EVIDENCE_TOKENS)


def test_ask_matches_library_answer(served):
    trial, question = _probe(served)
    r = served.client.post(
        "/api/ask", json={"trial_id": trial.trial_id, "question": question}
    )
    assert r.status_code == 200
    body = r.json()
    expected = pipeline.answer_question(
        served.model, trial.betas, question, served.cfg.generation
    )
    assert body["text"] == expected
    assert body["trial_id"] == trial.trial_id
    assert body["question"] == question
    assert body["beta"] == 0.0
    assert body["mask_id"] is None
    embedder = pipeline.embedder_for(served.model)
    assert body["caption_score"] == pytest.approx(
        caption_score(embedder, expected, trial.captions)
    )
    assert "evidence" not in body
    assert float(r.headers["X-Elapsed-Ms"]) >= 0.0


def test_ask_identical_requests_identical_bodies(served):
    trial, question = _probe(served)
    payload = {"trial_id": trial.trial_id, "question": question}
    first = served.client.post("/api/ask", json=payload)
    second = served.client.post("/api/ask", json=payload)
    assert first.content == second.content


def test_ask_evidence_block(served):
    trial, question = _probe(served)
    # Watch words straight from the trial's own caption, with a duplicate
    # to exercise order-preserving dedup in the echo.
    words = [w for w in word_tokens(trial.captions[0]) if w in served.model.vocab]
    watch = [words[0], words[1], words[0]]
    r = served.client.post(
        "/api/ask",
        json={
            "trial_id": trial.trial_id,
            "question": question,
            "evidence_tokens": watch,
        },
    )
    assert r.status_code == 200
    ev = r.json()["evidence"]
    assert ev["tokens"] == [words[0], words[1]]
    trace = token_evidence(
        served.model,
        served.model.encode_brain(trial.betas),
        question,
        watch,
        served.cfg.generation,
    )
    assert ev["per_step"] == trace.per_step
    assert ev["aggregate_log"] == trace.aggregate_log
    assert ev["aggregate_log"] == pytest.approx(math.log(max(ev["per_step"])))
    assert all(0.0 <= p <= 1.0 for p in ev["per_step"])


def test_ask_generation_override_changes_answer_length(served):
    trial, question = _probe(served)
    r = served.client.post(
        "/api/ask",
        json={
            "trial_id": trial.trial_id,
            "question": question,
            "generation": {"max_new_tokens": 2},
        },
    )
    assert r.status_code == 200
    import dataclasses

    gen = dataclasses.replace(served.cfg.generation, max_new_tokens=2)
    expected = pipeline.answer_question(served.model, trial.betas, question, gen)
    assert r.json()["text"] == expected


def test_stimulated_ask_matches_direct_computation(served):
    trial, question = _probe(served)
    localizer = localizer_ttest(served.groups["train"])
    mask = build_stim_mask(localizer.t_values, 0.05, source="face-localizer")
    r = served.client.post(
        "/api/ask",
        json={
            "trial_id": trial.trial_id,
            "question": question,
            "beta": 0.5,
            "mask_id": "face-top5pct",
        },
    )
    assert r.status_code == 200
    expected = pipeline.answer_question(
        served.model, stimulate(trial.betas, mask, 0.5), question, served.cfg.generation
    )
    assert r.json()["text"] == expected
    assert r.json()["beta"] == 0.5
    assert r.json()["mask_id"] == "face-top5pct"


def _post_raw(client, path, payload: str):
    return client.post(
        path, content=payload, headers={"content-type": "application/json"}
    )


def test_ask_error_codes(served):
    trial, question = _probe(served)
    cases = [
        ({"trial_id": "nope", "question": question}, 404, "unknown_trial"),
        (
            {"trial_id": trial.trial_id, "question": question, "beta": 0.5},
            400,
            "mask_required",
        ),
        (
            {
                "trial_id": trial.trial_id,
                "question": question,
                "beta": 0.5,
                "mask_id": "face-top50pct",
            },
            404,
            "unknown_mask",
        ),
        (
            {
                "trial_id": trial.trial_id,
                "question": question,
                "generation": {"mode": "sample"},
            },
            400,
            "bad_generation",
        ),
        (
            {
                "trial_id": trial.trial_id,
                "question": question,
                "generation": {"max_new_tokens": 65},
            },
            400,
            "bad_generation",
        ),
        (
            {
                "trial_id": trial.trial_id,
                "question": question,
                "generation": {"beams": 0},
            },
            400,
            "bad_generation",
        ),
        (
            {
                "trial_id": trial.trial_id,
                "question": question,
                "evidence_tokens": ["qqqqq"],
            },
            400,
            "unknown_tokens",
        ),
    ]
    for payload, status, code in cases:
        r = served.client.post("/api/ask", json=payload)
        assert r.status_code == status, payload
        assert r.json()["code"] == code


def test_ask_nonfinite_beta_rejected(served):
    trial, question = _probe(served)
    # json.dumps writes bare NaN; the service must refuse it after mask
    # resolution rather than stimulate with it.
    payload = json.dumps(
        {
            "trial_id": trial.trial_id,
            "question": question,
            "beta": float("nan"),
            "mask_id": "face-top5pct",
        }
    )
    r = _post_raw(served.client, "/api/ask", payload)
    assert r.status_code == 400
    assert r.json()["code"] == "bad_beta"


def test_ask_malformed_body_is_bad_request(served):
    r = served.client.post("/api/ask", json={"question": "hm"})
    assert r.status_code == 400
    assert r.json()["code"] == "bad_request"


def test_sweep_points_match_single_shot_calls(served):
    trial, _ = _probe(served)
    betas = [-0.5, 0.0, 0.5]
    r = served.client.post(
        "/api/sweep",
        json={"trial_id": trial.trial_id, "mask_id": "face-top5pct", "betas": betas},
    )
    assert r.status_code == 200
    body = r.json()
    assert body["question"] == "What is in this picture?"
    vocab = served.model.vocab
    watch = [t for t in PERSON_EVIDENCE_TOKENS if t in vocab]
    assert body["evidence_tokens"] == watch
    assert [p["beta"] for p in body["points"]] == betas
    localizer = localizer_ttest(served.groups["train"])
    mask = build_stim_mask(localizer.t_values, 0.05, source="face-localizer")
    for point in body["points"]:
        brain = served.model.encode_brain(stimulate(trial.betas, mask, point["beta"]))
        text = generate(served.model, brain, body["question"], served.cfg.generation)
        trace = token_evidence(
            served.model, brain, body["question"], watch, served.cfg.generation
        )
        assert point["text"] == text
        assert point["mentions_person"] == mentions_person(text)
        assert point["evidence_aggregate_log"] == trace.aggregate_log
    assert float(r.headers["X-Elapsed-Ms"]) >= 0.0


def test_sweep_grid_limits(served):
    trial, _ = _probe(served)
    base = {"trial_id": trial.trial_id, "mask_id": "face-top5pct"}
    r = served.client.post("/api/sweep", json={**base, "betas": []})
    assert (r.status_code, r.json()["code"]) == (400, "bad_grid")
    r = served.client.post(
        "/api/sweep", json={**base, "betas": [0.01 * i for i in range(26)]}
    )
    assert (r.status_code, r.json()["code"]) == (422, "grid_too_large")
    payload = json.dumps({**base, "betas": [0.0, float("inf")]})
    r = _post_raw(served.client, "/api/sweep", payload)
    assert (r.status_code, r.json()["code"]) == (400, "bad_grid")
    r = served.client.post(
        "/api/sweep", json={**base, "mask_id": "nope", "betas": [0.0]}
    )
    assert (r.status_code, r.json()["code"]) == (404, "unknown_mask")


def test_concurrent_identical_asks_agree(served):
    trial, question = _probe(served)
    watch = next(t for t in PERSON_EVIDENCE_TOKENS if t in served.model.vocab)
    payload = {
        "trial_id": trial.trial_id,
        "question": question,
        "evidence_tokens": [watch],
    }
    reference = served.client.post("/api/ask", json=payload).content

    def call(_):
        return served.client.post("/api/ask", json=payload).content

    with ThreadPoolExecutor(max_workers=8) as pool:
        bodies = list(pool.map(call, range(32)))
    assert all(b == reference for b in bodies)
