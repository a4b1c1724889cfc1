"""WAV ingestion/emission and STFT analysis/synthesis.

The STFT uses a periodic Hamming analysis window and weighted-overlap-add
(WOLA) synthesis: frames are windowed again on synthesis and the overlap-add
result is divided by the accumulated squared window. Because the Hamming
window never reaches zero, this reconstructs every covered sample exactly for
any shift not exceeding the window length.
"""

import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

_WSS_FLOOR = 1e-12


@dataclass
class Waveform:
    """Multichannel time-domain signal.

    Attributes:
        samples: float array of shape (n_channels, n_samples), nominally in
            [-1, 1].
        sample_rate: sampling frequency in Hz.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.samples.ndim != 2:
            raise ValueError("waveform samples must be 1-D or (channels, samples)")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def n_channels(self):
        return self.samples.shape[0]

    @property
    def n_samples(self):
        return self.samples.shape[1]

    @property
    def duration(self):
        return self.n_samples / self.sample_rate

    def channel(self, i):
        return self.samples[i]


@dataclass
class Spectrogram:
    """One-sided complex STFT of a single channel.

    Attributes:
        values: complex array of shape (n_bins, n_frames) where
            n_bins = window_length // 2 + 1 (DC through Nyquist).
        frame_shift: hop size in samples.
        window_length: analysis window length in samples.
        sample_rate: sampling frequency in Hz.
    """

    values: np.ndarray
    frame_shift: int
    window_length: int
    sample_rate: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 2:
            raise ValueError("spectrogram values must be (n_bins, n_frames)")
        if self.values.shape[0] != self.window_length // 2 + 1:
            raise ValueError(
                f"bin count {self.values.shape[0]} inconsistent with "
                f"window_length {self.window_length}"
            )
        if self.values.shape[1] < 1:
            raise ValueError("spectrogram must contain at least one frame")

    @property
    def n_bins(self):
        return self.values.shape[0]

    @property
    def n_frames(self):
        return self.values.shape[1]


def analysis_window(window_length):
    """Periodic Hamming window used for both analysis and synthesis."""
    return get_window("hamming", window_length, fftbins=True)


def _check_stft_args(window_length, frame_shift):
    if window_length <= 0 or window_length % 2 != 0:
        raise ValueError(f"window_length must be even and positive, got {window_length}")
    if frame_shift <= 0:
        raise ValueError(f"frame_shift must be positive, got {frame_shift}")
    if frame_shift > window_length:
        raise ValueError(
            f"frame_shift {frame_shift} exceeds window_length {window_length}"
        )


def stft(samples, window_length, frame_shift, sample_rate):
    """Short-time Fourier transform of a single channel.

    The signal is zero-padded at the tail so that every sample falls inside at
    least one frame; frame t covers samples [t * frame_shift,
    t * frame_shift + window_length).

    Args:
        samples: 1-D real signal.
        window_length: even window size in samples.
        frame_shift: hop size in samples, 0 < frame_shift <= window_length.
        sample_rate: sampling frequency in Hz.

    Returns:
        Spectrogram with window_length // 2 + 1 bins.
    """
    _check_stft_args(window_length, frame_shift)
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("stft expects a single channel (1-D array)")
    if x.size == 0:
        raise ValueError("cannot transform an empty signal")
    if x.size < window_length:
        warnings.warn(
            "signal shorter than one analysis window; zero-padding to one window",
            stacklevel=2,
        )
        x = np.pad(x, (0, window_length - x.size))

    n_frames = -(-x.size // frame_shift)  # ceil division
    padded_len = (n_frames - 1) * frame_shift + window_length
    x = np.pad(x, (0, padded_len - x.size))

    frames = np.lib.stride_tricks.sliding_window_view(x, window_length)
    frames = frames[:: frame_shift][:n_frames]
    window = analysis_window(window_length)
    values = np.fft.rfft(frames * window, axis=1).T
    return Spectrogram(values, frame_shift, window_length, sample_rate)


def istft(spec, original_length=None):
    """Inverse STFT by weighted overlap-add.

    DC and Nyquist imaginary parts are discarded on synthesis (they must be
    zero for a real signal). Reconstruction is exact up to rounding for any
    spectrogram produced by :func:`stft`.

    Args:
        spec: Spectrogram to invert.
        original_length: length to trim/zero-pad the output to. Defaults to
            the full overlap-add span (n_frames - 1) * frame_shift +
            window_length.

    Returns:
        1-D float array.
    """
    win_len = spec.window_length
    hop = spec.frame_shift
    _check_stft_args(win_len, hop)

    values = spec.values.copy()
    values[0] = values[0].real
    values[-1] = values[-1].real
    frames = np.fft.irfft(values, n=win_len, axis=0)

    window = analysis_window(win_len)
    full_len = (spec.n_frames - 1) * hop + win_len
    out = np.zeros(full_len)
    wss = np.zeros(full_len)
    for t in range(spec.n_frames):
        start = t * hop
        out[start : start + win_len] += frames[:, t] * window
        wss[start : start + win_len] += window**2
    out /= np.maximum(wss, _WSS_FLOOR)

    if original_length is None:
        return out
    if original_length <= full_len:
        return out[:original_length]
    return np.pad(out, (0, original_length - full_len))


def stft_stack(wave, window_length, frame_shift):
    """STFT of every channel, stacked as (n_bins, n_channels, n_frames)."""
    specs = [
        stft(wave.channel(i), window_length, frame_shift, wave.sample_rate)
        for i in range(wave.n_channels)
    ]
    return np.stack([s.values for s in specs], axis=1)


def istft_stack(values, window_length, frame_shift, sample_rate, original_length):
    """Inverse of :func:`stft_stack` for a (n_bins, n_channels, n_frames) array."""
    chans = [
        istft(
            Spectrogram(values[:, i, :], frame_shift, window_length, sample_rate),
            original_length,
        )
        for i in range(values.shape[1])
    ]
    return Waveform(np.stack(chans), sample_rate)


def read_wav(path):
    """Read a 16-bit PCM or 32-bit float RIFF WAV file.

    PCM samples are scaled by 1/32768 to the nominal [-1, 1) range; float
    samples are passed through unchanged.
    """
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except (ValueError, EOFError, struct.error) as exc:
        raise ValueError(f"malformed or unsupported WAV file {path!r}: {exc}") from exc

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(
            f"unsupported WAV sample format {data.dtype} in {path!r}; "
            "expected 16-bit PCM or 32-bit float"
        )

    if samples.ndim == 1:
        samples = samples[np.newaxis, :]
    else:
        samples = samples.T  # wavfile uses (samples, channels)
    return Waveform(samples, int(rate))


def write_wav(path, wave, encoding="float32"):
    """Write a Waveform as float32 (default) or 16-bit PCM WAV."""
    data = wave.samples.T
    if data.shape[1] == 1:
        data = data[:, 0]
    if encoding == "float32":
        wavfile.write(path, wave.sample_rate, data.astype(np.float32))
    elif encoding == "pcm16":
        clipped = np.clip(data, -1.0, 32767.0 / 32768.0)
        wavfile.write(path, wave.sample_rate, np.round(clipped * 32768.0).astype(np.int16))
    else:
        raise ValueError(f"unknown WAV encoding {encoding!r}")
