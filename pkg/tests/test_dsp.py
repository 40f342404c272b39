import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codecflow.dsp import Waveform, align_to_frames, load_wav, save_wav, simulate_lr, stft
from codecflow.errors import FormatError, UsageError

SR = 16000


def sine(freq, seconds=1.0, amp=0.5, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr)


def band_energy_db(x, sr, lo, hi, fft=1024):
    spec = stft(Waveform(x, sr), fft, fft // 4, "hann")
    f = spec.bin_frequencies()
    sel = (f >= lo) & (f < hi)
    return 10 * np.log10(np.sum(spec.magnitudes[:, sel] ** 2) + 1e-30)


# ---------------------------------------------------------------- WAV I/O


def test_pcm16_round_trip_within_quantization(tmp_path):
    w = sine(440.0)
    save_wav(tmp_path / "a.wav", w)
    back = load_wav(tmp_path / "a.wav")
    assert back.sample_rate == SR
    assert np.max(np.abs(back.samples - w.samples)) <= 0.5 / 32767 + 1e-12


def test_float32_round_trip(tmp_path):
    w = sine(440.0)
    save_wav(tmp_path / "a.wav", w, encoding="float32")
    np.testing.assert_allclose(load_wav(tmp_path / "a.wav").samples, w.samples, atol=1e-7)


def test_zero_length_file_is_format_error(tmp_path):
    (tmp_path / "empty.wav").write_bytes(b"")
    with pytest.raises(FormatError):
        load_wav(tmp_path / "empty.wav")


def _riff(fmt_tag, channels, bits, payload):
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", fmt_tag, channels, SR, SR * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_8bit_pcm_is_unsupported(tmp_path):
    (tmp_path / "u8.wav").write_bytes(_riff(1, 1, 8, bytes(range(100))))
    with pytest.raises(FormatError):
        load_wav(tmp_path / "u8.wav")


def test_stereo_is_format_error(tmp_path):
    (tmp_path / "st.wav").write_bytes(_riff(1, 2, 16, b"\x00" * 400))
    with pytest.raises(FormatError):
        load_wav(tmp_path / "st.wav")


def test_save_clips_and_counts(tmp_path):
    n = save_wav(tmp_path / "c.wav", Waveform([0.0, 1.5, -2.0, 0.5], SR))
    assert n == 2
    back = load_wav(tmp_path / "c.wav").samples
    assert np.all(np.abs(back) <= 1.0)


def test_waveform_rejects_non_finite():
    with pytest.raises(UsageError):
        Waveform([0.0, np.nan], SR)


# ---------------------------------------------------------------- STFT


def test_impulse_rect_window_is_flat():
    x = np.zeros(64)
    x[0] = 1.0
    spec = stft(Waveform(x, SR), 64, 64, "rect")
    np.testing.assert_allclose(spec.magnitudes[0], np.ones(33), atol=1e-12)


def test_sine_peak_bin_matches_direct_dft():
    w = sine(1000.0, seconds=0.25)
    spec = stft(w, 1024, 256, "hann")
    assert np.argmax(spec.magnitudes[0]) == 64
    # direct DFT of the first windowed frame
    frame = w.samples[:1024] * np.hanning(1025)[:-1]
    k = np.arange(513)
    direct = np.abs(np.exp(-2j * np.pi * np.outer(k, np.arange(1024)) / 1024) @ frame)
    np.testing.assert_allclose(spec.magnitudes[0], direct, rtol=1e-6, atol=1e-9)


def test_zeros_give_zero_magnitudes():
    spec = stft(Waveform(np.zeros(4096), SR), 1024, 256)
    assert spec.n_frames == 13
    assert not spec.magnitudes.any()


def test_short_signal_gives_empty_spectrogram():
    spec = stft(Waveform(np.ones(100), SR), 256, 64)
    assert spec.n_frames == 0
    assert spec.magnitudes.shape == (0, 129)


def test_parseval_per_frame():
    rng = np.random.default_rng(3)
    w = Waveform(rng.uniform(-1, 1, 3000), SR)
    fft, hop = 512, 128
    spec = stft(w, fft, hop, "hann")
    win = np.hanning(fft + 1)[:-1]
    for i in range(spec.n_frames):
        frame = w.samples[i * hop : i * hop + fft] * win
        m = spec.magnitudes[i]
        # one-sided spectrum: interior bins count twice
        spectral = (m[0] ** 2 + m[-1] ** 2 + 2 * np.sum(m[1:-1] ** 2)) / fft
        assert spectral == pytest.approx(np.sum(frame**2), rel=1e-3)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(256, 5000), fft_pow=st.integers(6, 8), hop_div=st.sampled_from([1, 2, 4]))
def test_frame_count_formula(n, fft_pow, hop_div):
    fft = 2**fft_pow
    hop = fft // hop_div
    spec = stft(Waveform(np.zeros(n), SR), fft, hop)
    expected = 1 + (n - fft) // hop if n >= fft else 0
    assert spec.n_frames == expected
    assert spec.magnitudes.shape[1] == fft // 2 + 1


def test_stft_argument_checks():
    w = Waveform(np.zeros(2048), SR)
    with pytest.raises(UsageError):
        stft(w, 1000, 100)
    with pytest.raises(UsageError):
        stft(w, 512, 1024)


# ---------------------------------------------------------------- LR simulation


def test_white_noise_stopband_attenuation():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(SR * 2)
    y = simulate_lr(Waveform(x, SR), 4000.0).samples
    pass_db = band_energy_db(y, SR, 0, 3800)
    stop_db = band_energy_db(y, SR, 4200, SR / 2)
    assert pass_db - stop_db >= 60.0


def test_passband_sine_amplitude_preserved():
    w = sine(2000.0, amp=0.5)
    y = simulate_lr(w, 4000.0).samples
    mid = slice(2000, -2000)
    ratio_db = 20 * np.log10(np.std(y[mid]) / np.std(w.samples[mid]))
    assert abs(ratio_db) < 0.5


def test_dc_unchanged_after_transient():
    y = simulate_lr(Waveform(np.full(8000, 0.3), SR), 4000.0).samples
    np.testing.assert_allclose(y[1000:-1000], 0.3, atol=1e-3)


def test_lr_keeps_rate_and_length():
    w = sine(300.0, seconds=0.37)
    y = simulate_lr(w, 4000.0)
    assert y.sample_rate == SR and y.samples.size == w.samples.size


def test_lr_is_idempotent_in_passband():
    rng = np.random.default_rng(1)
    once = simulate_lr(Waveform(rng.standard_normal(SR), SR), 4000.0)
    twice = simulate_lr(once, 4000.0)
    d = band_energy_db(twice.samples, SR, 0, 3500) - band_energy_db(once.samples, SR, 0, 3500)
    assert abs(d) < 0.1


def test_band_at_nyquist_is_usage_error():
    with pytest.raises(UsageError):
        simulate_lr(sine(100.0), 8000.0)


# ---------------------------------------------------------------- frame alignment


def test_align_identity():
    labels = np.array([0, 1, 2, 2, 1, 0])
    np.testing.assert_array_equal(align_to_frames(labels, 160, 6), labels)


def test_align_downsample_nearest_centre():
    np.testing.assert_array_equal(align_to_frames([0, 0, 1, 1, 2, 2], 1, 3), [0, 1, 2])


def test_align_upsample():
    np.testing.assert_array_equal(align_to_frames([2], 480, 3), [2, 2, 2])


def test_align_empty_is_usage_error():
    with pytest.raises(UsageError):
        align_to_frames([], 160, 4)


@settings(max_examples=50, deadline=None)
@given(labels=st.lists(st.integers(0, 2), min_size=1, max_size=60), target=st.integers(1, 120))
def test_align_length_and_label_set(labels, target):
    out = align_to_frames(labels, 160, target)
    assert out.size == target
    assert set(out.tolist()) <= set(labels)
