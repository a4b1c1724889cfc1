"""Training data: labeled power spectrograms from a toy-corpus directory.

The corpus layout is the one the simulator's ``--export-corpus`` writes:
``corpus.json`` with ``{class_count, sample_rate, files: [{path, label}]}``
and per-class WAV files. Spectrograms are normalized to unit mean power per
utterance; batches are fixed-length random crops (padded when short).
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import get_window

VAR_FLOOR = 1e-10


def _read_wav_mono(path):
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data[:, 0]
    return data, int(rate)


def power_spectrogram(samples, window_length, frame_shift):
    """One-sided power spectrogram with a periodic Hamming window."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < window_length:
        x = np.pad(x, (0, window_length - x.size))
    n_frames = -(-x.size // frame_shift)
    x = np.pad(x, (0, (n_frames - 1) * frame_shift + window_length - x.size))
    frames = np.lib.stride_tricks.sliding_window_view(x, window_length)
    frames = frames[::frame_shift][:n_frames]
    window = get_window("hamming", window_length, fftbins=True)
    spectra = np.fft.rfft(frames * window, axis=1).T
    return np.abs(spectra) ** 2


@dataclass
class LabeledSpectrogramSet:
    """Unit-mean-power spectrograms with integer labels."""

    spectrograms: list  # (F, N_m) float32 arrays, unit mean power
    labels: list  # int per item
    class_count: int
    freq_bins: int

    def __len__(self):
        return len(self.spectrograms)

    def one_hot(self, index):
        vec = np.zeros(self.class_count, dtype=np.float32)
        vec[self.labels[index]] = 1.0
        return vec


def spectrogram_set(utterances, class_count, window_length, frame_shift):
    """Build a LabeledSpectrogramSet from (samples, label) pairs."""
    spectrograms, labels = [], []
    freq_bins = window_length // 2 + 1
    for samples, label in utterances:
        power = power_spectrogram(samples, window_length, frame_shift)
        power /= max(power.mean(), VAR_FLOOR)
        spectrograms.append(power.astype(np.float32))
        labels.append(int(label))
    return LabeledSpectrogramSet(spectrograms, labels, class_count, freq_bins)


def load_corpus(corpus_dir, window_length, frame_shift):
    """Read an exported corpus directory into a LabeledSpectrogramSet."""
    corpus_dir = Path(corpus_dir)
    manifest = json.loads((corpus_dir / "corpus.json").read_text())
    utterances = []
    for entry in manifest["files"]:
        samples, _ = _read_wav_mono(corpus_dir / entry["path"])
        utterances.append((samples, entry["label"]))
    return spectrogram_set(
        utterances, manifest["class_count"], window_length, frame_shift
    )


def sample_batch(dataset, batch_size, segment_frames, rng):
    """Random fixed-length crops: (B, F, T) power and (B, C) one-hot labels."""
    power = np.zeros((batch_size, dataset.freq_bins, segment_frames), dtype=np.float32)
    labels = np.zeros((batch_size, dataset.class_count), dtype=np.float32)
    for b in range(batch_size):
        idx = int(rng.integers(len(dataset)))
        spec = dataset.spectrograms[idx]
        n = spec.shape[1]
        if n >= segment_frames:
            start = int(rng.integers(n - segment_frames + 1))
            power[b] = spec[:, start : start + segment_frames]
        else:
            power[b, :, :n] = spec
        labels[b] = dataset.one_hot(idx)
    return torch.from_numpy(power), torch.from_numpy(labels)
