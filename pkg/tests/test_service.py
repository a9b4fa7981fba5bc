"""HTTP service: endpoint contracts, validation errors, and a tiny
end-to-end experiment run through the API."""

import numpy as np
import pytest
from fastapi.testclient import TestClient

from fewshot_ser import __version__
from fewshot_ser.service import create_app

TINY_CONFIG = dict(
    corpus="synthetic",
    target_language="syn_c",
    meta_iters=2,
    meta_batch=2,
    inner_steps=1,
    model_blocks=1,
    model_filters=4,
    t_fixed=16,
    trials=2,
    eval_per_label=2,
    supervised_epochs=2,
    synth_clip_seconds=0.4,
    synth_clip_seconds_std=0.0,
    synth_clips_per_emotion=12,
    synth_fixed_per_class=8,
    k_shots=[2],
    train_k_shot=2,
    q_new=2,
    q_fixed=2,
    variants=["fmaml"],
)


@pytest.fixture(scope="module")
def client():
    with TestClient(create_app()) as c:
        yield c


class TestHealth:
    def test_ok(self, client):
        resp = client.get("/health")
        assert resp.status_code == 200
        assert resp.json() == {"status": "ok", "version": __version__}


class TestExperiments:
    def test_tiny_run(self, client, tmp_path):
        resp = client.post(
            "/experiments",
            json={"config": TINY_CONFIG, "output_dir": str(tmp_path / "run")},
        )
        assert resp.status_code == 200, resp.text
        report = resp.json()["report"]
        assert report["schema_version"] == 1
        assert {c["variant"] for c in report["cells"]} == {"fmaml"}
        assert (tmp_path / "run" / "report.json").exists()

    def test_seed_override_wins(self, client, tmp_path):
        resp = client.post(
            "/experiments",
            json={
                "config": {**TINY_CONFIG, "seed": 3},
                "seed": 9,
                "output_dir": str(tmp_path / "run"),
            },
        )
        assert resp.status_code == 200
        assert resp.json()["report"]["metadata"]["config"]["seed"] == 9

    def test_bad_config_is_422(self, client):
        resp = client.post(
            "/experiments",
            json={"config": {"corpus": "synthetic"}},  # target_language missing
        )
        assert resp.status_code == 422
        assert "target_language" in resp.json()["detail"]

    def test_unknown_profile_is_422(self, client):
        resp = client.post(
            "/experiments", json={"config": TINY_CONFIG, "profile": "huge"}
        )
        assert resp.status_code == 422

    def test_malformed_body_is_422(self, client):
        resp = client.post("/experiments", json={"config": "not a dict"})
        assert resp.status_code == 422


class TestCorporaSynth:
    def test_writes_wav_tree(self, client, tmp_path):
        out = tmp_path / "corpus"
        resp = client.post(
            "/corpora/synth",
            json={
                "out_dir": str(out),
                "languages": ["l1"],
                "clips_per_emotion": 2,
                "fixed_per_class": 3,
                "clip_seconds": 0.4,
                "clip_seconds_std": 0.0,
            },
        )
        assert resp.status_code == 200
        body = resp.json()
        # 5 emotions x 2 clips + 2 fixed labels x 3 clips
        assert body["written"] == 16
        assert len(list((out / "l1" / "anger").glob("*.wav"))) == 2
        assert len(list((out / "shared" / "silence").glob("*.wav"))) == 3

    def test_deterministic_given_seed(self, client, tmp_path):
        payloads = []
        for name in ("a", "b"):
            out = tmp_path / name
            client.post(
                "/corpora/synth",
                json={
                    "out_dir": str(out),
                    "languages": ["l1"],
                    "clips_per_emotion": 1,
                    "fixed_per_class": 1,
                    "seed": 7,
                    "clip_seconds": 0.4,
                    "clip_seconds_std": 0.0,
                },
            )
            payloads.append((out / "l1" / "anger" / "0000.wav").read_bytes())
        assert payloads[0] == payloads[1]


class TestFeatures:
    def test_cache_written(self, client, tmp_path):
        out = tmp_path / "corpus"
        client.post(
            "/corpora/synth",
            json={
                "out_dir": str(out),
                "languages": ["l1"],
                "clips_per_emotion": 1,
                "fixed_per_class": 1,
                "clip_seconds": 0.4,
                "clip_seconds_std": 0.0,
            },
        )
        cache = tmp_path / "cache"
        resp = client.post(
            "/features", json={"corpus_dir": str(out), "cache_dir": str(cache)}
        )
        assert resp.status_code == 200
        assert resp.json()["written"] == 7
        from fewshot_ser.audio import load_features

        coeffs = load_features(cache / "l1" / "anger" / "0000.mfc")
        assert coeffs.shape[0] == 40
        assert np.isfinite(coeffs).all()

    def test_missing_corpus_is_422(self, client, tmp_path):
        resp = client.post(
            "/features",
            json={"corpus_dir": str(tmp_path / "nope"), "cache_dir": str(tmp_path)},
        )
        assert resp.status_code == 422


class TestRender:
    def test_round_trip(self, client):
        report = {
            "cells": [
                {"variant": "fmaml", "k_shot": 5, "mean": 0.625, "std": 0.0, "accuracies": [0.625]}
            ]
        }
        resp = client.post("/reports/render", json={"report": report})
        assert resp.status_code == 200
        body = resp.json()
        assert "62.50%" in body["text"]
        assert "fmaml" in body["csv"]

    def test_empty_report_is_422(self, client):
        resp = client.post("/reports/render", json={"report": {"cells": []}})
        assert resp.status_code == 422
