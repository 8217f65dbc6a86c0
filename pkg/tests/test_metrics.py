import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rage import dataset as ds
from rage import dsp, metrics, synth
from rage.model import EnhancementUNet, ModelConfig, enhance_waveform


def _signal(n=4000, seed=0):
    return np.random.default_rng(seed).normal(size=n)


def _si_sdr_closed_form(e, r):
    # with alpha = <e,r>/<r,r>: |alpha r|^2 / |e - alpha r|^2 = <e,r>^2 / (|e|^2 |r|^2 - <e,r>^2)
    c = np.dot(e, r)
    return 10 * np.log10(c**2 / (np.dot(e, e) * np.dot(r, r) - c**2))


def test_si_sdr_perfect_and_scaled_clamp():
    r = _signal()
    assert metrics.si_sdr(r, r) == 60.0
    assert metrics.si_sdr(0.5 * r, r) == 60.0


def test_si_sdr_orthogonal_equal_energy_is_zero():
    r, n = _signal(seed=1), _signal(seed=2)
    n -= np.dot(n, r) / np.dot(r, r) * r
    n *= np.linalg.norm(r) / np.linalg.norm(n)
    assert metrics.si_sdr(r + n, r) == pytest.approx(0.0, abs=1e-9)


def test_si_sdr_matches_closed_form():
    rng = np.random.default_rng(3)
    for _ in range(10):
        r = rng.normal(size=500)
        e = rng.uniform(0.2, 3) * r + rng.uniform(0.1, 2) * rng.normal(size=500)
        assert metrics.si_sdr(e, r) == pytest.approx(_si_sdr_closed_form(e, r), abs=1e-9)


def test_si_sdr_scale_invariance():
    rng = np.random.default_rng(4)
    r = rng.normal(size=800)
    e = r + 0.3 * rng.normal(size=800)
    base = metrics.si_sdr(e, r)
    for a in (0.25, 2.0, 8.0):  # powers of two scale without rounding
        assert metrics.si_sdr(a * e, r) == base
    for a in (0.3, 1.7, 123.4):
        assert metrics.si_sdr(a * e, r) == pytest.approx(base, abs=1e-10)


def test_si_sdr_monotone_in_noise_energy():
    r, n = _signal(seed=5), _signal(seed=6)
    values = [metrics.si_sdr(r + g * n, r) for g in (0.01, 0.05, 0.2, 0.5, 1.0, 3.0)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_si_sdr_edge_cases():
    r = _signal(100)
    with pytest.raises(ValueError, match="silent"):
        metrics.si_sdr(r, np.zeros(100))
    assert metrics.si_sdr(np.zeros(100), r) == -60.0
    assert metrics.si_sdr(np.concatenate([r, [5.0, 6.0]]), r) == 60.0  # crops to the shorter signal


def test_lsd_values():
    r = _signal(8000, seed=7)
    assert metrics.lsd(r, r) == 0.0
    assert metrics.lsd(2 * r, r) == pytest.approx(20 * np.log10(2), abs=1e-6)
    assert 20 * np.log10(2) == pytest.approx(6.0206, abs=1e-4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 10.0))
def test_lsd_nonnegative(seed, gain):
    rng = np.random.default_rng(seed)
    r = rng.normal(size=2000)
    e = gain * r + rng.normal(size=2000)
    assert metrics.lsd(e, r) >= 0.0


def test_seg_snr_oracles():
    r = _signal(4096, seed=8)
    assert metrics.seg_snr(r, r) == 35.0
    # zero estimate: every frame's error equals the signal, 0 dB
    assert metrics.seg_snr(np.zeros_like(r), r) == pytest.approx(0.0, abs=1e-12)
    assert metrics.seg_snr(-10 * r, r) == -10.0
    with pytest.raises(ValueError, match="silent"):
        metrics.seg_snr(r, np.zeros_like(r))


def test_seg_snr_skips_silent_frames():
    r = np.concatenate([np.zeros(2048), _signal(2048, seed=9)])
    e = r + 0.1 * np.concatenate([np.ones(2048), _signal(2048, seed=10)])
    loud = metrics.seg_snr(e[2048:], r[2048:])
    assert metrics.seg_snr(e, r) == pytest.approx(loud, abs=1.0)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def test_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("evalcorpus")
    clean_dir, noise_dir = synth.write_corpus(root, n_clean=10, noise_kinds=("white", "pink"), seconds=0.5,
                                              noise_seconds=2.0, seed=4)
    entries = ds.build_manifest(clean_dir, noise_dir, split_counts=(0, 0, 10), seed=1)
    entries = ds.materialize_all(entries, root / "mix")
    return entries, root / "mix", root


def test_groups_cover_grid(test_corpus):
    entries, data_dir, _ = test_corpus
    report = metrics.evaluate(entries, data_dir)
    groups = report.groups()
    assert len(groups) == len(ds.SNR_GRID) * 2
    assert {(g["snr_db"], g["noise_category"]) for g in groups} == {(s, n) for s in ds.SNR_GRID for n in ("white", "pink")}
    assert sorted(f.entry_id for f in report.files) == sorted(e.entry_id for e in entries)


def test_aggregate_is_mean(test_corpus):
    entries, data_dir, _ = test_corpus
    report = metrics.evaluate(entries, data_dir)
    for g in report.groups():
        members = [f for f in report.files if (f.snr_db, f.noise_category) == (g["snr_db"], g["noise_category"])]
        for k in metrics.METRIC_NAMES:
            assert g["noisy"][k] == pytest.approx(np.mean([f.noisy[k] for f in members]), rel=1e-12)


def test_passthrough_si_sdr_tracks_target_snr(test_corpus):
    entries, data_dir, _ = test_corpus
    report = metrics.evaluate(entries, data_dir)
    for f in report.files:
        assert f.enhanced == f.noisy
        if f.snr_db == 0.0:
            assert f.noisy["si_sdr_db"] == pytest.approx(0.0, abs=0.5)
        assert f.noisy["si_sdr_db"] == pytest.approx(f.snr_db, abs=0.5)


def test_identity_enhancer_equals_passthrough(test_corpus):
    entries, data_dir, _ = test_corpus
    cfg = dsp.StftConfig()
    identity = lambda w: dsp.WaveBuffer(dsp.istft(dsp.stft(w, cfg), len(w)).samples, w.sample_rate_hz)
    a = metrics.evaluate(entries, data_dir)
    b = metrics.evaluate(entries, data_dir, enhancer=identity)
    for fa, fb in zip(a.files, b.files):
        for k in ("si_sdr_db", "seg_snr_db"):
            assert fb.enhanced[k] == pytest.approx(fa.enhanced[k], abs=1e-9)
        assert fb.enhanced["lsd_db"] == pytest.approx(fa.enhanced["lsd_db"], abs=1e-6)


def test_zero_head_model_scores_silence(test_corpus):
    entries, data_dir, _ = test_corpus
    model = EnhancementUNet(ModelConfig(base_channels=2, depth=1))
    report = metrics.evaluate(entries[:2], data_dir, enhancer=lambda w: enhance_waveform(model, w))
    assert all(f.enhanced["si_sdr_db"] == -60.0 for f in report.files)


def test_report_bytes_reproducible(test_corpus):
    entries, data_dir, _ = test_corpus
    a = metrics.evaluate(entries, data_dir).to_json()
    b = metrics.evaluate(list(reversed(entries)), data_dir).to_json()
    assert a == b
    doc = json.loads(a)
    assert doc["mode"] == "passthrough"
    assert doc["files"][0]["pesq"] is None and doc["groups"][0]["wer"] is None


def test_table_layout(test_corpus):
    entries, data_dir, _ = test_corpus
    table = metrics.evaluate(entries, data_dir).to_table()
    lines = table.strip().splitlines()
    assert lines[0].split()[:2] == ["SNR", "dB"]
    assert len({len(line) for line in lines}) == 1  # aligned columns
    # header, rule, 10 groups, 5 per-SNR summaries, one overall
    assert len(lines) == 2 + 10 + 5 + 1


def test_missing_files_enumerated(test_corpus, tmp_path):
    entries, data_dir, _ = test_corpus
    import shutil

    copy = tmp_path / "mix"
    shutil.copytree(data_dir, copy)
    gone = [ds.entry_paths(entries[0], copy)[0], ds.entry_paths(entries[3], copy)[1]]
    for p in gone:
        p.unlink()
    with pytest.raises(metrics.MissingFilesError) as err:
        metrics.evaluate(entries, copy)
    assert sorted(err.value.missing) == sorted(str(p) for p in gone)


def test_evaluate_rejects_empty_split(test_corpus):
    entries, data_dir, _ = test_corpus
    with pytest.raises(ValueError, match="no 'train' entries"):
        metrics.evaluate(entries, data_dir, split="train")
