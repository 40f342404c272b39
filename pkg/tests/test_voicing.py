import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codecflow import kernels
from codecflow.dsp import Waveform, centered_frames
from codecflow.errors import UsageError
from codecflow.pipeline.data import boundary_mask, segment_frame_labels, speechlike_utterance
from codecflow.voicing import (
    DB_FLOOR,
    SILENCE,
    UNVOICED,
    VOICED,
    VoicingConfig,
    VoicingSequence,
    extract_voicing,
    f0_vuv,
    frame_energy_db,
    silence_mask,
)

SR = 16000
FRAME, HOP = 400, 160


def tone(freq, seconds=1.0, amp=0.9):
    t = np.arange(int(seconds * SR)) / SR
    return amp * np.sin(2 * np.pi * freq * t)


def percentile_rule(db, percentile=10.0, margin=10.0):
    """The bare rule: silent iff level < percentile + margin."""
    return (db >= np.percentile(db, percentile) + margin).astype(np.int64)


# ---------------------------------------------------------------- silence gate


def test_constant_sine_has_no_silent_frames():
    mask = silence_mask(Waveform(tone(200.0), SR), FRAME, HOP)
    assert mask.size == 100
    assert mask.all()


def test_half_sine_half_zero():
    x = tone(200.0)
    x[SR // 2 :] = 0.0
    mask = silence_mask(Waveform(x, SR), FRAME, HOP)
    db = frame_energy_db(Waveform(x, SR), FRAME, HOP)
    # well away from the junction the two clusters are > 10 dB apart
    assert mask[:45].all()
    assert not mask[55:].any()
    # and the bare percentile rule agrees there
    np.testing.assert_array_equal(percentile_rule(db)[:45], mask[:45])
    np.testing.assert_array_equal(percentile_rule(db)[55:], mask[55:])


def test_zero_signal_all_silent():
    mask = silence_mask(Waveform(np.zeros(SR // 2), SR), FRAME, HOP)
    assert mask.size == 50 and not mask.any()


def test_empty_after_framing_gives_empty_mask():
    assert silence_mask(Waveform(np.zeros(0), SR), FRAME, HOP).size == 0


def test_energy_db_matches_direct_rms():
    rng = np.random.default_rng(0)
    x = 0.1 * rng.standard_normal(SR // 4)
    db = frame_energy_db(Waveform(x, SR), FRAME, HOP)
    frames = centered_frames(x, FRAME, HOP)
    inside = centered_frames(np.ones_like(x), FRAME, HOP).sum(axis=1)
    np.testing.assert_allclose(db, 20 * np.log10(np.sqrt((frames**2).sum(axis=1) / inside)))
    assert np.all(frame_energy_db(Waveform(np.zeros(800), SR), FRAME, HOP) == DB_FLOOR)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), m1=st.floats(0.0, 30.0), m2=st.floats(0.0, 30.0))
def test_larger_margin_never_unsilences(seed, m1, m2):
    rng = np.random.default_rng(seed)
    env = np.repeat(rng.uniform(0.0, 1.0, 16) ** 3, SR // 16)
    w = Waveform(env * rng.standard_normal(env.size), SR)
    lo, hi = sorted((m1, m2))
    a = silence_mask(w, FRAME, HOP, margin_db=lo)
    b = silence_mask(w, FRAME, HOP, margin_db=hi)
    assert np.all(b <= a)


# ---------------------------------------------------------------- V/UV


def test_200hz_sine_is_voiced():
    labels = f0_vuv(Waveform(tone(200.0), SR), FRAME, HOP)
    assert np.all(labels == VOICED)


def test_white_noise_is_mostly_unvoiced():
    rng = np.random.default_rng(1234)
    labels = f0_vuv(Waveform(0.3 * rng.standard_normal(SR), SR), FRAME, HOP)
    assert np.mean(labels == UNVOICED) >= 0.9


def test_1500hz_sine_is_unvoiced():
    labels = f0_vuv(Waveform(tone(1500.0), SR), FRAME, HOP)
    assert np.mean(labels == UNVOICED) >= 0.95


def test_bad_f0_range_is_usage_error():
    with pytest.raises(UsageError):
        f0_vuv(Waveform(tone(200.0), SR), FRAME, HOP, f0_min=800.0, f0_max=50.0)


def test_low_sample_rate_is_usage_error():
    with pytest.raises(UsageError):
        f0_vuv(Waveform(np.zeros(1000), 1000), 25, 10)


# ---------------------------------------------------------------- composed sequence


def test_digital_silence_all_zero():
    seq = extract_voicing(Waveform(np.zeros(SR), SR), 100)
    assert np.all(seq.labels == SILENCE)


def test_single_frame_flip_is_smoothed():
    np.testing.assert_array_equal(kernels.majority_smooth(np.array([2, 2, 1, 2, 2])), [2, 2, 2, 2, 2])


def test_sine_with_gap():
    x = tone(200.0)
    x[int(0.4 * SR) : int(0.6 * SR)] = 0.0
    labels = extract_voicing(Waveform(x, SR), 100).labels
    zeros = np.flatnonzero(labels == SILENCE)
    assert zeros.size > 0
    # one contiguous run covering the gap interior
    assert np.all(np.diff(zeros) == 1)
    assert zeros[0] <= 42 and zeros[-1] >= 57
    rest = np.delete(labels, zeros)
    assert np.all(rest == VOICED)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(400, 6000), target=st.integers(1, 80), seed=st.integers(0, 1000))
def test_output_length_and_label_set(n, target, seed):
    x = np.random.default_rng(seed).uniform(-0.5, 0.5, n)
    seq = extract_voicing(Waveform(x, SR), target)
    assert len(seq) == target
    assert set(seq.labels.tolist()) <= {SILENCE, UNVOICED, VOICED}


def test_sequence_rejects_bad_labels():
    with pytest.raises(UsageError):
        VoicingSequence([0, 3], 160, 400)


def test_speechlike_corpus_accuracy_outside_boundaries():
    cfg = VoicingConfig()
    correct = total = 0
    voiced_hits = voiced_total = 0
    for seed in range(4):
        x, segs = speechlike_utterance(np.random.default_rng([7, seed]), 2.0, SR)
        n_frames = int(np.ceil(x.size / HOP))
        truth = segment_frame_labels(segs, n_frames, HOP)
        keep = boundary_mask(segs, n_frames, HOP, guard=2)
        got = extract_voicing(Waveform(x, SR), n_frames, cfg).labels
        correct += np.sum(got[keep] == truth[keep])
        total += keep.sum()
        uv = f0_vuv(Waveform(x, SR), cfg.frame_len(SR), HOP)
        sel = keep & (truth == VOICED)
        voiced_hits += np.sum(uv[sel] == VOICED)
        voiced_total += sel.sum()
    assert correct / total >= 0.9
    assert voiced_hits / voiced_total >= 0.95
