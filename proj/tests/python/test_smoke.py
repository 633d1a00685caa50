import math

import numpy as np
import pytest

import angie


def test_cholesky_and_affine_reconstruct_covariance():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = rng.normal(size=(2, 2))
        c = m @ m.T + 1e-3 * np.eye(2)
        l = angie.cholesky(c)
        assert l[0, 1] == 0.0
        assert np.abs(l @ l.T - c).max() < 1e-9
        a = angie.affine_from_covariance(c)
        assert np.abs(a @ a.T - c).max() < 1e-8


def test_quantize_matches_brute_force_with_low_index_ties():
    rng = np.random.default_rng(1)
    book = rng.integers(-4, 5, size=(8, 3)).astype(float)
    book[5] = book[2]
    queries = np.vstack([rng.integers(-8, 9, size=(40, 3)) / 2.0, book])
    got = angie.quantize(queries, book)
    dist = ((queries[:, None, :] - book[None, :, :]) ** 2).sum(-1)
    assert got == list(dist.argmin(axis=1))
    assert 5 not in got


def test_metric_closed_forms():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(500, 4))
    assert angie.frechet_distance(x, x) < 1e-9
    beats = [0.5, 1.0, 1.7]
    assert angie.beat_consistency(beats, beats) == pytest.approx(1.0)
    shifted = [b + 0.1 for b in beats]
    assert angie.beat_consistency(beats, shifted) == pytest.approx(math.exp(-0.5), abs=1e-3)


def test_mfcc_shape_and_sample_rate_check():
    t = np.arange(16000) / 16000.0
    coeffs = angie.mfcc(list(0.5 * np.sin(2 * np.pi * 440 * t)))
    assert coeffs.shape == (1 + (16000 - 400) // 160, 12)
    with pytest.raises(ValueError):
        angie.mfcc([0.0] * 8000, 8000)


def test_motion_file_round_trip(tmp_path):
    mu = np.full((3, 2, 2), 0.5)
    l = np.tile(np.array([0.1, 0.01, 0.08]), (3, 2, 1))
    path = str(tmp_path / "m.motion")
    angie.write_motion(path, mu, l, 25.0)
    mu2, l2, fps = angie.read_motion(path)
    assert fps == 25.0
    assert np.array_equal(mu, mu2) and np.array_equal(l, l2)
    bad = l.copy()
    bad[0, 0, 0] = -1.0
    with pytest.raises(ValueError):
        angie.write_motion(path, mu, bad, 25.0)


def test_config_presets_and_digest():
    desk = angie.PipelineConfig("desk")
    paper = angie.PipelineConfig("paper")
    assert desk.get("vq.codebook_size") == "32"
    assert paper.get("vq.codebook_size") == "512"
    assert desk.digest() != paper.digest()
    desk.set("seed", "9")
    assert "seed = 9" in desk.dump()
    with pytest.raises(ValueError):
        desk.set("no.such.key", "1")
    with pytest.raises(RuntimeError):
        angie.PipelineConfig("huge")


def test_tiny_pipeline_reports_metrics(tmp_path):
    import json

    cfg = angie.PipelineConfig("desk")
    for key, value in {
        "paths.corpus": str(tmp_path / "corpus"),
        "paths.work": str(tmp_path / "work"),
        "corpus.classes": "2",
        "corpus.clips_per_class": "2",
        "vq.steps": "5",
        "gpt.layers": "1",
        "gpt.channels": "16",
        "gpt.heads": "2",
        "gpt.steps": "2",
        "refine.hidden": "4",
        "refine.steps": "1",
        "features.hidden": "8",
        "features.dim": "4",
        "features.steps": "2",
    }.items():
        cfg.set(key, value)
    angie.make_corpus(cfg)
    with pytest.raises(RuntimeError, match="train-vq"):
        angie.train_gpt(cfg)
    artifact, metrics, seconds = angie.train_vq(cfg)
    assert artifact.endswith("vq.ckpt") and seconds >= 0
    assert "heldout_perplexity" in json.loads(metrics)
    angie.train_gpt(cfg)
    angie.train_refine(cfg)
    report = angie.evaluate_report(cfg)
    assert report["config_digest"] == cfg.digest()
    assert math.isfinite(report["fgd"])
