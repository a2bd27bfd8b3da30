"""HTTP probe service: trials, masks, question answering, sweeps.

Everything is loaded once at startup and never mutated, so identical
requests get identical bodies no matter how they interleave. Wall time
is reported in the X-Elapsed-Ms response header rather than the body to
keep bodies byte-deterministic.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import __version__
from .decoding import GenerationConfig, generate, token_evidence
from .experiments import (
    PERSON_EVIDENCE_TOKENS,
    StimMask,
    build_stim_mask,
    mentions_person,
    stimulate,
)
from .metrics import caption_score
from .pipeline import answer_question, embedder_for, load_model_file, split_trials
from .world import load_dataset, localizer_ttest

MAX_SWEEP_POINTS = 25
MAX_NEW_TOKENS_LIMIT = 64


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        self.status, self.code, self.message = status, code, message
        super().__init__(message)


class AskRequest(BaseModel):
    trial_id: str
    question: str
    beta: float = 0.0
    mask_id: str | None = None
    evidence_tokens: list[str] | None = None
    generation: dict | None = None


class SweepRequest(BaseModel):
    trial_id: str
    mask_id: str
    betas: list[float]
    question: str = "What is in this picture?"


_GEN_OVERRIDES = {"beams", "min_p", "max_new_tokens", "temperature"}


def _generation_config(base: GenerationConfig, overrides: dict | None) -> GenerationConfig:
    if not overrides:
        return base
    unknown = set(overrides) - _GEN_OVERRIDES
    if unknown:
        raise ApiError(400, "bad_generation", f"unknown generation key(s) {sorted(unknown)}")
    cfg = dataclasses.replace(base, **overrides)
    if cfg.max_new_tokens > MAX_NEW_TOKENS_LIMIT:
        raise ApiError(400, "bad_generation", f"max_new_tokens capped at {MAX_NEW_TOKENS_LIMIT}")
    try:
        cfg.validate()
    except ValueError as e:
        raise ApiError(400, "bad_generation", str(e)) from e
    return cfg


def build_app(checkpoint: str, dataset: str, cors: bool = False) -> FastAPI:
    model, cfg, ck = load_model_file(checkpoint)
    world_cfg, _, trials = load_dataset(dataset)
    groups = split_trials(trials, world_cfg)
    by_id = {t.trial_id: t for t in trials}
    test_ids = [t.trial_id for t in groups["test"]]
    embedder = embedder_for(model)
    localizer = localizer_ttest(groups["train"])
    masks: dict[str, StimMask] = {}
    for fraction in cfg.experiments.mask_fractions:
        mask = build_stim_mask(localizer.t_values, fraction, source="face-localizer")
        masks[f"face-top{100 * fraction:g}pct"] = mask

    app = FastAPI(title="braintext probe service", version=__version__)

    if cors:
        from fastapi.middleware.cors import CORSMiddleware

        app.add_middleware(
            CORSMiddleware,
            allow_origins=["*"],
            allow_methods=["*"],
            allow_headers=["*"],
        )

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status, content={"code": exc.code, "message": exc.message}
        )

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400, content={"code": "bad_request", "message": str(exc.errors())}
        )

    def _trial(trial_id: str):
        if trial_id not in by_id:
            raise ApiError(404, "unknown_trial", f"no trial {trial_id!r}")
        return by_id[trial_id]

    def _mask(mask_id: str) -> StimMask:
        if mask_id not in masks:
            raise ApiError(
                404, "unknown_mask", f"no mask {mask_id!r}; see /api/masks"
            )
        return masks[mask_id]

    def _betas_for(trial, beta: float, mask_id: str | None):
        if beta == 0.0:
            return trial.betas
        if mask_id is None:
            raise ApiError(400, "mask_required", "beta != 0 requires a mask_id")
        if not np.isfinite(beta):
            raise ApiError(400, "bad_beta", "beta must be finite")
        return stimulate(trial.betas, _mask(mask_id), beta)

    @app.get("/api/health")
    def health():
        return {
            "status": "ok",
            "version": __version__,
            "checkpoint_hash": ck.hash,
            "phase": ck.phase,
            "n_trials": len(trials),
            "n_test_trials": len(test_ids),
            "vocab_size": len(model.vocab),
            "n_brain_tokens": model.n_brain,
            "beta_grid": list(cfg.experiments.beta_grid),
        }

    @app.get("/api/trials")
    def list_trials():
        out = []
        for tid in test_ids:
            t = by_id[tid]
            out.append(
                {
                    "trial_id": t.trial_id,
                    "caption_preview": t.captions[0],
                    "questions": [q for q, _ in t.qa_pairs],
                    "ground_truth": {
                        "revealable": True,
                        "category": t.scene.category,
                        "count": t.scene.count,
                        "setting": t.scene.setting,
                        "has_person": t.scene.has_person,
                        "captions": list(t.captions),
                    },
                }
            )
        return {"trials": out}

    @app.get("/api/masks")
    def list_masks():
        return {
            "masks": [
                {
                    "mask_id": mid,
                    "fraction": m.fraction,
                    "n_active": m.n_active,
                    "source": m.source,
                }
                for mid, m in sorted(masks.items())
            ],
            "default_evidence_tokens": list(PERSON_EVIDENCE_TOKENS),
        }

    @app.post("/api/ask")
    def ask(req: AskRequest):
        t0 = time.perf_counter()
        trial = _trial(req.trial_id)
        gen_cfg = _generation_config(cfg.generation, req.generation)
        betas = _betas_for(trial, req.beta, req.mask_id)
        text = answer_question(model, betas, req.question, gen_cfg)
        body = {
            "trial_id": req.trial_id,
            "question": req.question,
            "beta": req.beta,
            "mask_id": req.mask_id,
            "text": text,
            "caption_score": caption_score(embedder, text, trial.captions),
        }
        if req.evidence_tokens:
            missing = [tok for tok in req.evidence_tokens if tok not in model.vocab]
            if missing:
                raise ApiError(
                    400, "unknown_tokens", f"not in vocabulary: {missing}"
                )
            trace = token_evidence(
                model,
                model.encode_brain(betas),
                req.question,
                req.evidence_tokens,
                gen_cfg,
            )
            body["evidence"] = {
                "tokens": list(dict.fromkeys(req.evidence_tokens)),
                "per_step": trace.per_step,
                "aggregate_log": trace.aggregate_log,
            }
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        return JSONResponse(content=body, headers={"X-Elapsed-Ms": f"{elapsed_ms:.1f}"})

    @app.post("/api/sweep")
    def sweep(req: SweepRequest):
        t0 = time.perf_counter()
        trial = _trial(req.trial_id)
        mask = _mask(req.mask_id)
        if not req.betas:
            raise ApiError(400, "bad_grid", "betas must not be empty")
        if len(req.betas) > MAX_SWEEP_POINTS:
            raise ApiError(
                422, "grid_too_large", f"at most {MAX_SWEEP_POINTS} grid points"
            )
        bad = [b for b in req.betas if not np.isfinite(b)]
        if bad:
            raise ApiError(400, "bad_grid", "betas must be finite")
        watch = [tok for tok in PERSON_EVIDENCE_TOKENS if tok in model.vocab]
        points = []
        for beta in req.betas:
            betas = stimulate(trial.betas, mask, beta)
            brain = model.encode_brain(betas)
            text = generate(model, brain, req.question, cfg.generation)
            trace = token_evidence(model, brain, req.question, watch, cfg.generation)
            points.append(
                {
                    "beta": beta,
                    "text": text,
                    "mentions_person": mentions_person(text),
                    "evidence_aggregate_log": trace.aggregate_log,
                }
            )
        body = {
            "trial_id": req.trial_id,
            "mask_id": req.mask_id,
            "question": req.question,
            "evidence_tokens": watch,
            "points": points,
        }
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        return JSONResponse(content=body, headers={"X-Elapsed-Ms": f"{elapsed_ms:.1f}"})

    return app
