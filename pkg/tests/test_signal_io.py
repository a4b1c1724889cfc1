import numpy as np
import pytest

from fastsep.signal_io import (
    Spectrogram,
    Waveform,
    analysis_window,
    istft,
    read_wav,
    stft,
    write_wav,
)


def test_paper_geometry_256ms_window_at_16khz():
    fs = 16000
    win = int(0.256 * fs)
    hop = int(0.128 * fs)
    assert win == 4096 and hop == 2048
    x = np.random.default_rng(0).standard_normal(fs)
    spec = stft(x, win, hop, fs)
    assert spec.n_bins == 2049
    assert spec.frame_shift == 2048


def test_zero_signal_gives_zero_spectrogram():
    spec = stft(np.zeros(8192), 1024, 512, 16000)
    assert np.all(spec.values == 0)


def test_sinusoid_matches_naive_dft_per_frame():
    fs = 16000
    win, hop = 512, 256
    k = 37  # bin index; frequency k * fs / win
    n = np.arange(4 * win)
    x = np.sin(2 * np.pi * k * n / win)
    spec = stft(x, win, hop, fs)

    window = analysis_window(win)
    for t in range(spec.n_frames):
        frame = np.zeros(win)
        seg = x[t * hop : t * hop + win]
        frame[: seg.size] = seg
        frame *= window
        naive = np.array(
            [np.sum(frame * np.exp(-2j * np.pi * f * np.arange(win) / win))
             for f in range(win // 2 + 1)]
        )
        mags = np.abs(spec.values[:, t])
        assert np.max(np.abs(mags - np.abs(naive))) < 1e-10 * max(np.abs(naive).max(), 1.0)


@pytest.mark.parametrize("length,win,hop", [(8192, 1024, 512), (6144, 2048, 512), (4096, 512, 512)])
def test_roundtrip_exact_for_shift_multiple_lengths(length, win, hop):
    x = np.random.default_rng(42).standard_normal(length)
    spec = stft(x, win, hop, 16000)
    y = istft(spec, original_length=length)
    assert np.max(np.abs(y - x)) < 1e-8


def test_zero_spectrogram_inverts_to_zero():
    spec = Spectrogram(np.zeros((257, 5), dtype=complex), 256, 512, 16000)
    assert np.all(istft(spec) == 0)


def test_consistency_projection_is_idempotent():
    rng = np.random.default_rng(7)
    win, hop, n_frames = 256, 128, 9
    values = rng.standard_normal((129, n_frames)) + 1j * rng.standard_normal((129, n_frames))
    spec = Spectrogram(values, hop, win, 16000)

    def project(s):
        x = istft(s, original_length=n_frames * hop)
        return stft(x, win, hop, 16000)

    once = project(spec)
    twice = project(once)
    assert once.n_frames == n_frames
    assert np.max(np.abs(twice.values - once.values)) < 1e-8


def test_stft_is_linear():
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((2, 4096))
    a, b = 1.7, -0.4
    combo = stft(a * x + b * y, 512, 256, 16000).values
    parts = a * stft(x, 512, 256, 16000).values + b * stft(y, 512, 256, 16000).values
    assert np.max(np.abs(combo - parts)) < 1e-10 * np.max(np.abs(parts))


def test_parseval_energy_consistency_per_frame():
    rng = np.random.default_rng(11)
    win, hop = 512, 256
    x = rng.standard_normal(4096)
    spec = stft(x, win, hop, 16000)
    window = analysis_window(win)
    for t in range(spec.n_frames):
        frame = np.zeros(win)
        seg = x[t * hop : t * hop + win]
        frame[: seg.size] = seg
        frame_energy = np.sum((frame * window) ** 2)
        bins = np.abs(spec.values[:, t]) ** 2
        spectrum_energy = (bins[0] + bins[-1] + 2 * np.sum(bins[1:-1])) / win
        assert abs(frame_energy - spectrum_energy) < 1e-6 * max(frame_energy, 1e-12)


def test_short_signal_pads_with_warning():
    with pytest.warns(UserWarning, match="shorter than one analysis window"):
        spec = stft(np.ones(100), 256, 128, 16000)
    assert spec.n_frames >= 1


def test_stft_input_validation():
    with pytest.raises(ValueError, match="empty"):
        stft(np.array([]), 256, 128, 16000)
    with pytest.raises(ValueError, match="exceeds"):
        stft(np.ones(1000), 256, 512, 16000)
    with pytest.raises(ValueError, match="even"):
        stft(np.ones(1000), 255, 128, 16000)


def test_spectrogram_bin_count_validation():
    with pytest.raises(ValueError, match="inconsistent"):
        Spectrogram(np.zeros((100, 4), dtype=complex), 128, 256, 16000)


def test_wav_float_roundtrip_identity(tmp_path):
    rng = np.random.default_rng(5)
    wave = Waveform(rng.uniform(-0.9, 0.9, size=(2, 3000)).astype(np.float32), 16000)
    path = tmp_path / "x.wav"
    write_wav(path, wave)
    back = read_wav(path)
    assert back.sample_rate == 16000
    assert back.n_channels == 2
    np.testing.assert_array_equal(back.samples, wave.samples.astype(np.float32))


def test_wav_pcm16_roundtrip_close(tmp_path):
    rng = np.random.default_rng(6)
    wave = Waveform(rng.uniform(-0.9, 0.9, size=(1, 2000)), 8000)
    path = tmp_path / "x.wav"
    write_wav(path, wave, encoding="pcm16")
    back = read_wav(path)
    assert np.max(np.abs(back.samples - wave.samples)) < 1.0 / 32768


def test_malformed_wav_raises_descriptive_error(tmp_path):
    path = tmp_path / "bad.wav"
    path.write_bytes(b"this is not a RIFF file at all")
    with pytest.raises(ValueError, match="WAV"):
        read_wav(path)


def test_unsupported_codec_raises(tmp_path):
    from scipy.io import wavfile

    path = tmp_path / "u8.wav"
    wavfile.write(path, 8000, np.zeros(100, dtype=np.uint8))
    with pytest.raises(ValueError, match="unsupported WAV sample format"):
        read_wav(path)


def test_waveform_invariants():
    with pytest.raises(ValueError, match="sample_rate"):
        Waveform(np.zeros((1, 10)), 0)
    wave = Waveform(np.zeros(10), 16000)  # 1-D promoted to one channel
    assert wave.n_channels == 1
