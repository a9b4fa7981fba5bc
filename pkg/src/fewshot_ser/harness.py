"""Experiment orchestration: config parsing, leave-one-language-out runs,
report and table emission.

One invocation = one experiment: a target language held out of
meta-training, a grid of (variant, k_shot) cells, each evaluated with
repeated random target tasks. Reports are deterministic given (config,
master seed); timestamps live in a separate metadata field.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import (
    FeatureClip,
    MfccConfig,
    load_features,
    load_wav,
    mfcc,
    save_features,
)
from .episodes import DatasetRegistry, EpisodeSpec
from .metalearn import (
    TrainConfig,
    meta_train,
    run_protocol,
    save_checkpoint,
)
from .model import ModelConfig
from .synth import CorpusSpec, synth_emotion_corpus, synth_fixed_pool

CACHE_ENV = "FEWSHOT_SER_CACHE"

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Bad experiment configuration."""


@dataclass
class ExperimentConfig:
    corpus: str = "synthetic"
    target_language: str = ""
    source_languages: list = field(default_factory=list)  # empty = all others
    variants: list = field(default_factory=lambda: ["supervised", "maml", "fmaml"])
    k_shots: list = field(default_factory=lambda: [5, 10, 20])
    train_k_shot: int = 5
    n_new: int = 5
    n_fixed: int = 2
    q_new: int = 5
    q_fixed: int = 5
    alpha: float = 0.1
    beta: float = 0.001
    meta_batch: int = 16
    inner_steps: int = 5
    finetune_iters: int = -1  # -1 = same as inner_steps
    meta_iters: int = 2000
    grad_mode: str = "first_order"
    trials: int = 100
    eval_per_label: int = 25
    seed: int = 0
    output_dir: str = "runs/latest"
    jobs: int = 1
    freeze_fixed_slots: bool = True
    supervised_epochs: int = 100
    model_blocks: int = 4
    model_filters: int = 64
    t_fixed: int = 300
    apply_cmn: bool = True
    synth_seed: int = 1
    synth_fixed_seed: int = 2
    synth_clip_seconds: float = 3.5
    synth_clip_seconds_std: float = 0.3
    synth_fixed_per_class: int = 60
    synth_clips_per_emotion: int = 0  # 0 = corpus-shaped default counts


PROFILES = {
    "paper": {},
    "smoke": {
        "meta_iters": 300,
        "meta_batch": 4,
        "inner_steps": 3,
        # 300 outer iterations cannot move the initialization at the
        # paper-scale meta step size, so the smoke profile uses a larger one
        "beta": 0.1,
        "finetune_iters": 20,
        "model_blocks": 2,
        "model_filters": 8,
        "t_fixed": 32,
        "synth_clip_seconds": 0.4,
        "synth_clip_seconds_std": 0.05,
        "trials": 20,
    },
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if raw.startswith("[") and raw.endswith("]"):
        inner = raw[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(v.strip()) for v in inner.split(",")]
    return _parse_scalar(raw)


def _parse_scalar(raw: str):
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw.strip("\"'")


def parse_config(path, profile: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Flat key = value config file; unknown keys are rejected.

    Lines starting with '#' are comments. Values are numbers, booleans,
    quoted or bare strings, or [comma, separated, lists].
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return build_config(values, profile=profile, overrides=overrides)


def build_config(values: dict, profile: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    for key in values:
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
    merged: dict = {}
    if profile:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        merged.update(PROFILES[profile])
    merged.update(values)
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = ExperimentConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    if not cfg.corpus:
        raise ConfigError("missing required key 'corpus'")
    if not cfg.target_language:
        raise ConfigError("missing required key 'target_language'")
    for v in cfg.variants:
        if v not in ("supervised", "maml", "fmaml"):
            raise ConfigError(f"unknown variant {v!r}")
    if cfg.grad_mode not in ("first_order", "second_order"):
        raise ConfigError(f"unknown grad_mode {cfg.grad_mode!r}")
    if not cfg.k_shots:
        raise ConfigError("k_shots must be non-empty")


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# corpus loading


def _mfcc_config(cfg: ExperimentConfig) -> MfccConfig:
    return MfccConfig()


def load_corpus(cfg: ExperimentConfig) -> DatasetRegistry:
    if cfg.corpus == "synthetic":
        spec = CorpusSpec(
            seed=cfg.synth_seed,
            clips_per_emotion=cfg.synth_clips_per_emotion or None,
            clip_seconds=cfg.synth_clip_seconds,
            clip_seconds_std=cfg.synth_clip_seconds_std,
            mfcc_config=_mfcc_config(cfg),
        )
        clips = synth_emotion_corpus(spec)
        clips += synth_fixed_pool(
            cfg.synth_fixed_per_class,
            seed=cfg.synth_fixed_seed,
            clip_seconds=cfg.synth_clip_seconds,
            clip_seconds_std=cfg.synth_clip_seconds_std,
            mfcc_config=_mfcc_config(cfg),
        )
        return DatasetRegistry(clips)
    return DatasetRegistry(load_wav_corpus(cfg.corpus, _mfcc_config(cfg)))


def load_wav_corpus(root, mfcc_cfg: MfccConfig | None = None, cache_dir=None) -> list:
    """root/<language>/<emotion>/<clip>.wav -> FeatureClips.

    With a cache dir (argument or FEWSHOT_SER_CACHE), features are read
    from / written to mirrored .mfc files.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"corpus directory not found: {root}")
    mfcc_cfg = mfcc_cfg or MfccConfig()
    cache_dir = cache_dir or os.environ.get(CACHE_ENV)
    clips = []
    for wav_path in sorted(root.glob("*/*/*.wav")):
        language, emotion = wav_path.parts[-3], wav_path.parts[-2]
        rel = wav_path.relative_to(root)
        coeffs = None
        cache_path = None
        if cache_dir:
            cache_path = Path(cache_dir) / rel.with_suffix(".mfc")
            if cache_path.exists():
                coeffs = load_features(cache_path)
        if coeffs is None:
            coeffs = mfcc(load_wav(wav_path), mfcc_cfg)
            if cache_path is not None:
                cache_path.parent.mkdir(parents=True, exist_ok=True)
                save_features(cache_path, coeffs)
        clips.append(
            FeatureClip(coeffs, emotion=emotion, language=language, source_id=str(rel))
        )
    if not clips:
        raise ConfigError(f"no WAV clips found under {root}")
    return clips


# ---------------------------------------------------------------------------
# experiment execution


def _model_config(cfg: ExperimentConfig) -> ModelConfig:
    return ModelConfig(
        blocks=cfg.model_blocks,
        filters=cfg.model_filters,
        input_hw=(MfccConfig().n_mfcc, cfg.t_fixed),
        n_out=cfg.n_new + cfg.n_fixed,
    )


def _train_config(cfg: ExperimentConfig, variant: str) -> TrainConfig:
    return TrainConfig(
        alpha=cfg.alpha,
        beta=cfg.beta,
        meta_batch=cfg.meta_batch,
        inner_steps=cfg.inner_steps,
        meta_iters=cfg.meta_iters,
        finetune_iters=None if cfg.finetune_iters < 0 else cfg.finetune_iters,
        grad_mode=cfg.grad_mode,
        variant=variant,
        seed=cfg.seed,
        t_fixed=cfg.t_fixed,
        apply_cmn=cfg.apply_cmn,
        freeze_fixed_slots=cfg.freeze_fixed_slots,
        supervised_epochs=cfg.supervised_epochs,
    )


def _episode_spec(cfg: ExperimentConfig, k_shot: int) -> EpisodeSpec:
    return EpisodeSpec(
        n_new=cfg.n_new,
        n_fixed=cfg.n_fixed,
        k_shot=k_shot,
        q_new=cfg.q_new,
        q_fixed=cfg.q_fixed,
    )


def _meta_train_variant(cfg: ExperimentConfig, variant: str):
    """Meta-train one variant; separate function so it can run in a
    worker process (the registry is rebuilt from the config)."""
    reg = load_corpus(cfg)
    sources = _source_languages(cfg, reg)
    tc = _train_config(cfg, variant)
    spec = _episode_spec(cfg, cfg.train_k_shot)
    theta, trace = meta_train(reg, spec, sources, tc, _model_config(cfg))
    leaked = reg.accessed_languages & {cfg.target_language}
    if leaked:
        raise RuntimeError(f"meta-training read held-out language {leaked}")
    return variant, theta, trace


def _protocol_cell(cfg: ExperimentConfig, variant: str, k: int, theta):
    reg = load_corpus(cfg)
    tc = _train_config(cfg, variant)
    spec = _episode_spec(cfg, k)
    return run_protocol(
        reg,
        spec,
        cfg.target_language,
        tc,
        _model_config(cfg),
        trials=cfg.trials,
        eval_per_label=cfg.eval_per_label,
        initializer=theta,
    )


def _source_languages(cfg: ExperimentConfig, reg: DatasetRegistry):
    sources = cfg.source_languages or [
        l for l in reg.languages() if l != cfg.target_language
    ]
    return sorted(l for l in sources if l != cfg.target_language)


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Full (variant, k_shot) grid; cell failures are recorded, not fatal.

    Writes report.json, tables.csv, trace_<variant>.csv, and per-variant
    checkpoints to cfg.output_dir. Returns the report dict.
    """
    started = time.time()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    reg = load_corpus(cfg)
    sources = _source_languages(cfg, reg)
    notes = []
    if cfg.source_languages and cfg.target_language in cfg.source_languages:
        notes.append(
            f"target language {cfg.target_language!r} removed from source set"
        )

    meta_variants = [v for v in cfg.variants if v != "supervised"]
    thetas: dict = {}
    traces: dict = {}
    errors: dict = {}
    if cfg.jobs > 1 and len(meta_variants) > 1:
        with ProcessPoolExecutor(min(cfg.jobs, len(meta_variants))) as ex:
            futs = {
                ex.submit(_meta_train_variant, cfg, v): v for v in meta_variants
            }
            for fut, v in futs.items():
                try:
                    _, thetas[v], traces[v] = fut.result()
                except Exception as exc:  # recorded per cell below
                    errors[v] = f"{type(exc).__name__}: {exc}"
    else:
        for v in meta_variants:
            try:
                _, thetas[v], traces[v] = _meta_train_variant(cfg, v)
            except Exception as exc:
                errors[v] = f"{type(exc).__name__}: {exc}"

    chash = config_hash(cfg)
    for v, theta in thetas.items():
        save_checkpoint(out / f"checkpoint_{v}.bin", theta, chash, cfg.seed)

    cells = []
    for variant in cfg.variants:
        for k in cfg.k_shots:
            cell = {"variant": variant, "k_shot": k}
            if variant in errors:
                cell["error"] = errors[variant]
                cells.append(cell)
                continue
            try:
                res = _protocol_cell(
                    cfg, variant, k, thetas.get(variant)
                )
                cell.update(res)
            except Exception as exc:
                cell["error"] = f"{type(exc).__name__}: {exc}"
            cells.append(cell)

    report = {
        "schema_version": SCHEMA_VERSION,
        "metadata": {
            "seed": cfg.seed,
            "config": dataclasses.asdict(cfg),
            "config_hash": chash,
            "corpus_fingerprint": reg.fingerprint(),
            "source_languages": sources,
            "target_language": cfg.target_language,
            "notes": notes,
            "timestamps": {
                "started": started,
                "finished": time.time(),
            },
        },
        "cells": cells,
        "traces": {
            v: {
                "meta_loss": t.meta_loss,
                "query_acc": t.query_acc,
            }
            for v, t in traces.items()
        },
    }
    write_report(report, out)
    return report


def write_report(report: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2))
    try:
        text, csv_str = emit_tables(report)
    except ValueError:
        pass  # every cell errored; report.json still records why
    else:
        (out / "tables.csv").write_text(csv_str)
        (out / "tables.txt").write_text(text)
    for v, t in report.get("traces", {}).items():
        lines = ["iter,meta_loss,query_acc"]
        for i, (l, a) in enumerate(zip(t["meta_loss"], t["query_acc"])):
            lines.append(f"{i},{l!r},{a!r}")
        (out / f"trace_{v}.csv").write_text("\n".join(lines) + "\n")


def report_without_timestamps(report: dict) -> dict:
    clean = json.loads(json.dumps(report))
    clean.get("metadata", {}).pop("timestamps", None)
    return clean


# ---------------------------------------------------------------------------
# tables


def emit_tables(report: dict):
    """(text, csv) accuracy tables: one row per variant, one column per K."""
    cells = report.get("cells", [])
    if not any("mean" in c for c in cells):
        raise ValueError("report has no completed cells")
    variants = []
    ks = []
    for c in cells:
        if c["variant"] not in variants:
            variants.append(c["variant"])
        if c["k_shot"] not in ks:
            ks.append(c["k_shot"])
    grid = {(c["variant"], c["k_shot"]): c for c in cells}

    def fmt(c):
        if c is None or "mean" not in c:
            return "—"
        return f"{100.0 * c['mean']:.2f}%"

    header = ["Model"] + [f"{k}-shot" for k in ks]
    widths = [max(len(header[0]), *(len(v) for v in variants))] + [
        max(len(h), 7) for h in header[1:]
    ]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for v in variants:
        row = [v.ljust(widths[0])]
        for k, w in zip(ks, widths[1:]):
            row.append(fmt(grid.get((v, k))).rjust(w))
        lines.append("  ".join(row))
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    buf.write("variant," + ",".join(str(k) for k in ks) + "\n")
    for v in variants:
        vals = []
        for k in ks:
            c = grid.get((v, k))
            vals.append("" if c is None or "mean" not in c else repr(c["mean"]))
        buf.write(v + "," + ",".join(vals) + "\n")
    return text, buf.getvalue()


def parse_tables_csv(csv_str: str) -> dict:
    """(variant, k_shot) -> mean accuracy; inverse of the CSV side of
    emit_tables for round-trip checks."""
    lines = [l for l in csv_str.strip().splitlines() if l]
    ks = [int(k) for k in lines[0].split(",")[1:]]
    out = {}
    for line in lines[1:]:
        parts = line.split(",")
        for k, raw in zip(ks, parts[1:]):
            if raw:
                out[(parts[0], k)] = float(raw)
    return out
