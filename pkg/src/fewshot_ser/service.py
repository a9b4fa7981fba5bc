"""HTTP service wrapping the experiment toolkit.

Endpoints mirror the CLI verbs: synthesize a WAV corpus, precompute MFCC
caches, run an experiment grid, re-render report tables. Requests and
responses are pydantic models; experiments run synchronously within the
request (desk-scale runs; put a proxy timeout in front for long ones).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .audio import MfccConfig, mfcc, save_wav
from .harness import (
    ConfigError,
    build_config,
    emit_tables,
    load_wav_corpus,
    run_experiment,
)
from .audio import save_features
from .synth import (
    EMOTIONS,
    FIXED_LABELS,
    TABLE1_SHAPED_COUNTS,
    synth_waveform,
)
from .streams import derive_rng


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str = __version__


class ExperimentRequest(BaseModel):
    config: dict = Field(default_factory=dict, description="flat config keys")
    profile: str | None = None
    seed: int | None = None
    output_dir: str | None = None
    jobs: int | None = None


class ExperimentResponse(BaseModel):
    report: dict


class SynthRequest(BaseModel):
    out_dir: str
    languages: list[str] = Field(default_factory=lambda: list(TABLE1_SHAPED_COUNTS))
    clips_per_emotion: int | None = None
    fixed_per_class: int = 60
    seed: int = 0
    clip_seconds: float = 3.5
    clip_seconds_std: float = 0.3


class SynthResponse(BaseModel):
    written: int
    out_dir: str


class FeaturesRequest(BaseModel):
    corpus_dir: str
    cache_dir: str


class FeaturesResponse(BaseModel):
    written: int
    cache_dir: str


class RenderRequest(BaseModel):
    report: dict


class RenderResponse(BaseModel):
    text: str
    csv: str


def synthesize_wav_corpus(req: SynthRequest) -> int:
    """Write a synthetic corpus as root/<language>/<emotion>/<clip>.wav
    plus a shared/ directory with the fixed classes."""
    out = Path(req.out_dir)
    rng = derive_rng(req.seed, "wav-corpus")
    written = 0
    for language in req.languages:
        for emotion in EMOTIONS:
            if req.clips_per_emotion is not None:
                n = req.clips_per_emotion
            elif language in TABLE1_SHAPED_COUNTS:
                n = TABLE1_SHAPED_COUNTS[language][emotion]
            else:
                n = 50
            d = out / language / emotion
            d.mkdir(parents=True, exist_ok=True)
            for i in range(n):
                dur = max(0.2, rng.normal(req.clip_seconds, req.clip_seconds_std))
                save_wav(d / f"{i:04d}.wav", synth_waveform(emotion, language, dur, rng))
                written += 1
    for label in FIXED_LABELS:
        d = out / "shared" / label
        d.mkdir(parents=True, exist_ok=True)
        for i in range(req.fixed_per_class):
            dur = max(0.2, rng.normal(req.clip_seconds, req.clip_seconds_std))
            save_wav(d / f"{i:04d}.wav", synth_waveform(label, "shared", dur, rng))
            written += 1
    return written


def precompute_features(corpus_dir: str, cache_dir: str) -> int:
    clips = load_wav_corpus(corpus_dir, MfccConfig(), cache_dir=None)
    cache = Path(cache_dir)
    for clip in clips:
        path = cache / Path(clip.source_id).with_suffix(".mfc")
        path.parent.mkdir(parents=True, exist_ok=True)
        save_features(path, clip.mfcc)
    return len(clips)


def create_app() -> FastAPI:
    app = FastAPI(title="fewshot-ser", version=__version__)

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse()

    @app.post("/experiments", response_model=ExperimentResponse)
    def experiments(req: ExperimentRequest):
        try:
            cfg = build_config(
                req.config,
                profile=req.profile,
                overrides={
                    "seed": req.seed,
                    "output_dir": req.output_dir,
                    "jobs": req.jobs,
                },
            )
        except ConfigError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        try:
            report = run_experiment(cfg)
        except Exception as exc:
            raise HTTPException(status_code=500, detail=f"{type(exc).__name__}: {exc}")
        return ExperimentResponse(report=report)

    @app.post("/corpora/synth", response_model=SynthResponse)
    def corpora_synth(req: SynthRequest):
        written = synthesize_wav_corpus(req)
        return SynthResponse(written=written, out_dir=req.out_dir)

    @app.post("/features", response_model=FeaturesResponse)
    def features(req: FeaturesRequest):
        try:
            written = precompute_features(req.corpus_dir, req.cache_dir)
        except ConfigError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return FeaturesResponse(written=written, cache_dir=req.cache_dir)

    @app.post("/reports/render", response_model=RenderResponse)
    def render(req: RenderRequest):
        try:
            text, csv_str = emit_tables(req.report)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return RenderResponse(text=text, csv=csv_str)

    return app
