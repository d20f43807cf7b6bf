import json
import logging
import math

import numpy
import numpy.testing as npt
import pytest

from progattn.data_ingest import (
    Band,
    DEFAULT_BANDS,
    SplitRule,
    apply_standardizer,
    compute_de,
    differential_entropy,
    fit_standardizer,
    load_manifest,
    read_features,
    split,
    synth_generate,
    write_dataset,
    write_features,
)
from progattn.errors import ConfigError, LoadError, ShapeError
from progattn.graph_spectral import ring_montage, save_montage


def _write_manifest(tmp_path, samples, channels=16, bands=5, **overrides):
    montage = ring_montage(channels)
    save_montage(str(tmp_path / "montage.json"), montage)
    manifest = {
        "format_version": 1,
        "channels": [m.name for m in montage],
        "classes": ["negative", "neutral", "positive"],
        "bands": [{"name": b.name, "low": b.low, "high": b.high} for b in DEFAULT_BANDS[:bands]],
        "montage": "montage.json",
        "samples": samples,
        "split": {"train_trials": [1, 2], "test_trials": [3]},
    }
    manifest.update(overrides)
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    return str(tmp_path)


"""
Manifests and feature files
"""


def test_load_inline_manifest(tmp_path, rng):
    records = [
        {"features": rng.uniform(-1, 1, (16, 5)).tolist(), "label": i % 3, "subject": "s02", "trial": 1 + i % 3}
        for i in range(6)
    ]
    dataset = load_manifest(_write_manifest(tmp_path, records))
    assert (dataset.channel_count, dataset.band_count, dataset.num_classes) == (16, 5, 3)
    assert len(dataset.samples) == 6
    assert dataset.subjects == ["s02"]
    npt.assert_array_equal(dataset.samples[4].features.data, numpy.asarray(records[4]["features"]))
    assert dataset.manifest.split == SplitRule((1, 2), (3,))


def test_manifest_errors(tmp_path, rng):
    with pytest.raises(LoadError, match="empty dataset"):
        load_manifest(_write_manifest(tmp_path, []))

    short = [{"features": rng.uniform(-1, 1, (15, 5)).tolist(), "label": 0, "trial": 1}]
    with pytest.raises(ShapeError, match="record 0"):
        load_manifest(_write_manifest(tmp_path, short))

    bad_label = [{"features": numpy.zeros((16, 5)).tolist(), "label": 3, "trial": 1}]
    with pytest.raises(LoadError):
        load_manifest(_write_manifest(tmp_path, bad_label))

    stray_trial = [{"features": numpy.zeros((16, 5)).tolist(), "label": 0, "trial": 7}]
    with pytest.raises(LoadError):
        load_manifest(_write_manifest(tmp_path, stray_trial))

    fine = [{"features": numpy.zeros((16, 5)).tolist(), "label": 0, "trial": 1}]
    with pytest.raises(LoadError):
        load_manifest(_write_manifest(tmp_path, fine, channels=16, classes="three"))
    with pytest.raises(LoadError):
        load_manifest(str(tmp_path / "missing.json"))


def test_manifest_rejects_fractional_numbers(tmp_path):
    features = numpy.zeros((16, 5)).tolist()
    fractional = [{"features": features, "label": 1.7, "trial": 1}]
    with pytest.raises(LoadError, match="record 0"):
        load_manifest(_write_manifest(tmp_path, fractional))
    for label in (True, "1"):
        record = [{"features": features, "label": label, "trial": 1}]
        with pytest.raises(LoadError, match="record 0"):
            load_manifest(_write_manifest(tmp_path, record))
    with pytest.raises(LoadError, match="split rule"):
        load_manifest(
            _write_manifest(
                tmp_path,
                [{"features": features, "label": 0, "trial": 1}],
                split={"train_trials": [1.5], "test_trials": [3]},
            )
        )

    integral = [{"features": features, "label": 2.0, "trial": 3.0}]
    dataset = load_manifest(_write_manifest(tmp_path, integral))
    assert (dataset.samples[0].label, dataset.samples[0].trial) == (2, 3)
    assert isinstance(dataset.samples[0].label, int)


def test_missing_feature_file(tmp_path, small_dataset):
    path = write_dataset(small_dataset, str(tmp_path / "out"))
    (tmp_path / "out" / "features" / "00003.bin").unlink()
    with pytest.raises(LoadError, match="record 3"):
        load_manifest(path)
    with pytest.raises(LoadError, match="Cannot read"):
        read_features(str(tmp_path / "out" / "features" / "00003.bin"))


def test_feature_files(tmp_path, rng):
    values = rng.uniform(-5, 5, (4, 3))
    for name in ("x.bin", "x.csv"):
        write_features(str(tmp_path / name), values)
        npt.assert_array_equal(read_features(str(tmp_path / name)), values)

    raw = (tmp_path / "x.bin").read_bytes()
    assert raw[:8] == bytes([4, 0, 0, 0, 3, 0, 0, 0])
    assert len(raw) == 8 + 8 * 12
    (tmp_path / "cut.bin").write_bytes(raw[:-8])
    with pytest.raises(LoadError):
        read_features(str(tmp_path / "cut.bin"))
    with pytest.raises(LoadError):
        read_features(str(tmp_path / "x.npy"))


def test_written_dataset_loads_back(tmp_path, small_dataset):
    path = write_dataset(small_dataset, str(tmp_path / "out"), fmt="csv")
    loaded = load_manifest(path)
    assert loaded.manifest.channel_names == small_dataset.manifest.channel_names
    assert loaded.manifest.split == small_dataset.manifest.split
    assert [s.label for s in loaded.samples] == [s.label for s in small_dataset.samples]
    for a, b in zip(loaded.samples, small_dataset.samples):
        npt.assert_array_equal(a.features.data, b.features.data)


"""
Differential entropy
"""


def test_differential_entropy_values():
    assert abs(differential_entropy(1.0) - 1.4189385332) < 1e-9
    assert numpy.isfinite(differential_entropy(0.0))
    assert differential_entropy(0.0) == differential_entropy(1e-12)


def test_compute_de_of_silence():
    de = compute_de(numpy.zeros((2, 2000)), fs=200.0).data
    assert de.shape == (2, 5)
    npt.assert_array_equal(de, numpy.full((2, 5), differential_entropy(0.0)))


def test_compute_de_alpha_peak():
    t = numpy.arange(2000) / 200.0
    signal = numpy.sin(2 * math.pi * 10.0 * t)
    de = compute_de(signal, fs=200.0).data
    assert de.shape == (1, 5)
    assert int(numpy.argmax(de[0])) == 2


def test_compute_de_amplitude_scaling(rng):
    noise = rng.standard_normal((3, 4000))
    base = compute_de(noise, fs=200.0).data
    for s in (0.5, 2.0, 10.0):
        npt.assert_allclose(compute_de(s * noise, fs=200.0).data - base, math.log(s), atol=1e-9)


def test_compute_de_rejects_bad_bands():
    with pytest.raises(ConfigError):
        compute_de(numpy.zeros((1, 2000)), fs=90.0)
    with pytest.raises(ConfigError):
        compute_de(numpy.zeros((1, 2000)), fs=200.0, bands=[Band("odd", 8.0, 4.0)])
    with pytest.raises(ConfigError):
        compute_de(numpy.zeros((1, 100)), fs=200.0)


"""
Synthetic data, splits and standardization
"""


def test_synth_is_deterministic_and_balanced():
    a = synth_generate(channels=8, bands=3, classes=3, n_per_class=20, seed=5)
    b = synth_generate(channels=8, bands=3, classes=3, n_per_class=20, seed=5)
    c = synth_generate(channels=8, bands=3, classes=3, n_per_class=20, seed=6)
    for x, y in zip(a.samples, b.samples):
        assert numpy.array_equal(x.features.data, y.features.data)
        assert (x.label, x.trial, x.subject) == (y.label, y.trial, y.subject)
    assert not numpy.array_equal(a.samples[0].features.data, c.samples[0].features.data)
    assert numpy.bincount([s.label for s in a.samples]).tolist() == [20, 20, 20]
    for s in a.samples:
        assert (s.trial - 1) % 3 == s.label


def test_synth_planted_offset():
    dataset = synth_generate(
        channels=6, bands=2, classes=2, n_per_class=400, planted=[[0], [5]], snr=4.0, seed=1
    )
    class0 = numpy.mean([s.features.data for s in dataset.samples if s.label == 0], axis=0)
    assert numpy.all(numpy.abs(class0[0] - 4.0) < 0.25)
    assert numpy.all(numpy.abs(class0[1:]) < 0.25)


def test_synth_validation(caplog):
    with pytest.raises(ConfigError):
        synth_generate(channels=8, snr=-1.0)
    with pytest.raises(ConfigError):
        synth_generate(channels=8, classes=3, planted=[[0], [1]])
    with pytest.raises(ConfigError):
        synth_generate(channels=8, classes=2, planted=[[0], [9]])
    with caplog.at_level(logging.WARNING, logger="progattn.data"):
        synth_generate(channels=8, classes=2, n_per_class=2, planted=[[1, 2], [2, 1]])
    assert any("indistinguishable" in r.getMessage() for r in caplog.records)


def test_trial_split():
    dataset = synth_generate(channels=4, bands=2, classes=3, n_per_class=30, trials_per_class=5)
    train, test = split(dataset)
    assert sorted({s.trial for s in train}) == list(range(1, 10))
    assert sorted({s.trial for s in test}) == list(range(10, 16))
    assert (len(train), len(test)) == (54, 36)

    seed_iv = synth_generate(channels=4, bands=2, classes=4, n_per_class=12, trials_per_class=6)
    rule = SplitRule(tuple(range(1, 17)), tuple(range(17, 25)))
    train, test = split(seed_iv.samples, rule)
    assert (len(train), len(test)) == (32, 16)

    with pytest.raises(ConfigError):
        split(dataset, SplitRule((1, 2, 3), (3, 4)))
    with pytest.raises(ConfigError):
        split(dataset, SplitRule((1,), (99,)))


def test_standardizer(small_dataset):
    train, test = split(small_dataset)
    mean, std = fit_standardizer(train)
    stacked = numpy.stack([apply_standardizer(s.features.data, mean, std) for s in train])
    npt.assert_allclose(stacked.mean(axis=0), 0.0, atol=1e-12)
    npt.assert_allclose(stacked.std(axis=0), 1.0, atol=1e-12)

    constant = [s for s in train[:1]]
    _, std = fit_standardizer(constant)
    npt.assert_array_equal(std, numpy.ones_like(std))
    with pytest.raises(ConfigError):
        fit_standardizer([])
