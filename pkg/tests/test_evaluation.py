import json

import numpy as np
import pytest
import torch

from puregaze.errors import DomainError, ProbeFailure
from puregaze.evaluation import (EvalReport, ablation_sweep, clamp_labels, evaluate, identity_leakage,
                                 illumination_buckets, illumination_leakage, parse_sweep_value,
                                 state_checksum, train_probe, visualize_purification)
from puregaze.synthdata import DomainSpec, GazeDataset, NuisanceSpec, generate_domain, load_dataset
from puregaze.training import TrainConfig, build_model, train

TINY = dict(backbone_width=4, head_hidden=32, batch_size=8, resolution=64, log_every=1)


@pytest.fixture(scope="module")
def domains(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    src = generate_domain(DomainSpec(NuisanceSpec((0.5, 1.0), (1000, 1001, 1002)), sample_count=24, seed=3),
                          root / "src")
    tgt = generate_domain(DomainSpec(NuisanceSpec((0.2, 0.4), (2000, 2001)), sample_count=12, seed=4),
                          root / "tgt")
    return src, tgt


def fake_dataset(intensities):
    """Dataset whose images have exactly the requested mean intensities (in 1/255 steps)."""
    n = len(intensities)
    images = np.empty((n, 4, 4, 3), dtype=np.uint8)
    for i, v in enumerate(intensities):
        images[i] = int(round(v * 255))
    return GazeDataset(images, np.zeros((n, 2)), np.zeros((n, 2, 2)), np.full(n, np.nan),
                       np.full(n, -1), [f"{i}.png" for i in range(n)])


def fake_report(data, errors):
    errors = np.asarray(errors, dtype=np.float64)
    return EvalReport(errors, np.zeros((len(data), 2)), np.zeros((len(data), 2)), list(data.paths))


def test_evaluate_never_runs_sa_module(domains):
    src, _ = domains
    config = TrainConfig(**TINY)
    bundle = build_model(config)
    calls = []
    handle = bundle.sa.register_forward_hook(lambda *a: calls.append(1))
    try:
        report = evaluate((bundle, config), src)
    finally:
        handle.remove()
    assert calls == []
    assert report.errors.shape == (24,)
    assert report.mean_error == pytest.approx(float(np.mean(report.errors)))
    assert np.all(report.errors >= 0)


def test_evaluate_writes_records(domains, tmp_path):
    src, _ = domains
    config = TrainConfig(**TINY)
    report = evaluate((build_model(config), config), src)
    report.write(tmp_path / "eval.jsonl")
    lines = [json.loads(l) for l in (tmp_path / "eval.jsonl").read_text().splitlines()]
    assert len(lines) == 24
    assert lines[0]["image"] == report.paths[0]


def test_clamp_labels_keeps_predictions_in_range():
    out = clamp_labels(np.array([[2.0, 4.0], [-2.0, -4.0], [0.1, 0.2]]))
    assert np.all(np.abs(out[:, 0]) <= np.pi / 2)
    assert np.all(np.abs(out[:, 1]) <= np.pi)
    assert np.allclose(out[2], [0.1, 0.2])
    assert out[0, 1] == pytest.approx(4.0 - 2 * np.pi)


def test_overfits_tiny_training_set(domains):
    src, _ = domains
    config = TrainConfig(**TINY, baseline=True, steps=300, lr_backbone=1e-3, lr_head=1e-3)
    before = evaluate((build_model(config), config), src).mean_error
    after = evaluate((train(config, src).bundle, config), src).mean_error
    assert after < 0.25 * before


def test_buckets_drop_small_and_keep_counts():
    # 7 images at 0.2, 6 at 0.6, 8 at 0.9
    values = [0.2] * 7 + [0.6] * 6 + [0.9] * 8
    data = fake_dataset(values)
    a = fake_report(data, np.full(len(values), 5.0))
    b = fake_report(data, np.full(len(values), 3.0))
    table = illumination_buckets(a, b, data)
    assert [r.count for r in table.rows] == [7, 8]
    assert table.dropped == 6
    assert sum(r.count for r in table.rows) + table.dropped == table.total == len(values)
    for r in table.rows:
        assert r.low <= r.intensity <= r.high
        assert r.improvement == pytest.approx(2.0)


def test_identical_intensities_give_one_bucket():
    data = fake_dataset([0.5] * 10)
    table = illumination_buckets(fake_report(data, np.arange(10.0)), fake_report(data, np.zeros(10)), data)
    assert len(table.rows) == 1
    assert table.rows[0].count == 10
    assert table.rows[0].error_a == pytest.approx(4.5)


def test_full_intensity_lands_in_last_bucket():
    data = fake_dataset([1.0] * 7)
    table = illumination_buckets(fake_report(data, np.ones(7)), fake_report(data, np.ones(7)), data)
    assert table.rows[0].bucket == 50


def test_buckets_require_matching_reports():
    data = fake_dataset([0.5] * 8)
    other = fake_dataset([0.5] * 7)
    with pytest.raises(DomainError):
        illumination_buckets(fake_report(data, np.ones(8)), fake_report(other, np.ones(7)), data)


def test_leakage_scores_range_and_extremes():
    rng = np.random.default_rng(0)
    illum = rng.uniform(0.2, 1.0, 40)
    recon = illum[:, None, None, None] * np.ones((40, 3, 4, 4))
    assert illumination_leakage(recon, illum) == pytest.approx(1.0)
    noise = rng.uniform(size=(40, 3, 4, 4))
    assert 0.0 <= illumination_leakage(noise, illum) < 0.3

    ident = np.repeat(np.arange(4), 10)
    by_id = np.repeat(rng.uniform(size=(4, 3, 4, 4)), 10, axis=0)
    assert identity_leakage(by_id, ident) == pytest.approx(1.0)
    assert identity_leakage(np.ones((40, 3, 4, 4)), ident) == 0.0
    assert 0.0 <= identity_leakage(noise, ident) <= 1.0
    assert identity_leakage(noise, ident) == identity_leakage(noise.copy(), ident.copy())
    assert np.isnan(identity_leakage(noise, np.zeros(40, dtype=int)))


def test_probe_learns_from_random_backbone(domains):
    src, _ = domains
    config = TrainConfig(**TINY)
    bundle = build_model(config)
    data = load_dataset(src)
    _, losses = train_probe(bundle.backbone, data, config, 60, seed=0, batch_size=8)
    assert np.all(np.isfinite(losses))
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:3])


def test_probe_failure_on_divergence(domains, monkeypatch):
    import puregaze.evaluation as ev

    src, _ = domains
    config = TrainConfig(**TINY)
    bundle = build_model(config)
    monkeypatch.setattr(ev, "reconstruction_loss", lambda a, b: torch.tensor(float("nan")))
    with pytest.raises(ProbeFailure):
        train_probe(bundle.backbone, load_dataset(src), config, 5)


def test_visualize_writes_grid_and_scores(domains, tmp_path):
    src, _ = domains
    config = TrainConfig(**TINY)
    purified = (build_model(config), config)
    baseline = (build_model(config.replace(seed=1)), config)
    result = visualize_purification(purified, baseline, src, 5, tmp_path, probe_purified=True)
    assert result.grid.exists()
    saved = json.loads((tmp_path / "leakage.json").read_text())
    for key in ("purified", "baseline_probe", "purified_probe"):
        assert set(saved[key]) == {"illumination", "identity"}
        for v in saved[key].values():
            assert 0.0 <= v <= 1.0


@pytest.mark.parametrize("param,text,expected", [
    ("k", "0.5", 0.5), ("sigma_sq", "off", None), ("sigma_sq", "20", 20.0), ("sigma_sq", None, None),
])
def test_parse_sweep_value(param, text, expected):
    assert parse_sweep_value(param, text) == expected


@pytest.mark.parametrize("param,text", [("k", "1"), ("k", "off"), ("sigma_sq", "0"), ("alpha", "1")])
def test_parse_sweep_value_rejects(param, text):
    with pytest.raises(DomainError):
        parse_sweep_value(param, text)


def test_sweep_rows_match_independent_runs(domains, tmp_path):
    src, tgt = domains
    base = TrainConfig(**TINY, steps=3)
    result = ablation_sweep("k", ["0", "0.5"], base, src, tgt, seeds=(0, 1), out_dir=tmp_path)
    assert [r.value for r in result.rows] == [0.0, 0.5]
    assert all(r.seed_count == 2 and len(r.errors) == 2 for r in result.rows)
    assert result.rows[0].spread == pytest.approx(np.std(result.rows[0].errors))

    solo = train(base.replace(k=0.0, seed=1), src)
    assert state_checksum(solo.bundle.backbone) == result.rows[0].checksums[1]
    assert evaluate((solo.bundle, solo.config), tgt).mean_error == result.rows[0].errors[1]

    header, *lines = (tmp_path / "sweep.tsv").read_text().splitlines()
    assert header.split("\t") == ["value", "mean_error", "spread", "seed_count"]
    assert len(lines) == 2
    rows = [json.loads(l) for l in (tmp_path / "sweep.jsonl").read_text().splitlines()]
    assert {"param", "value", "mean_error", "spread", "seed_count"} <= set(rows[0])


def test_sweep_sigma_off_matches_uniform_attention(domains):
    src, tgt = domains
    base = TrainConfig(**TINY, steps=2)
    result = ablation_sweep("sigma_sq", ["off"], base, src, tgt)
    solo = train(base.replace(sigma_sq=None), src)
    assert result.rows[0].value is None
    assert result.rows[0].checksums[0] == state_checksum(solo.bundle.backbone)
