"""Shoebox-room simulation: image-method RIRs, convolutive scenes, toy corpus.

The image method mirrors the source across the room walls; each image
contributes an impulse delayed by distance/c, attenuated by 1/(4 pi d) and by
the product of wall reflection coefficients along its path. Fractional delays
use a Hann-windowed sinc with cutoff at Nyquist, so integer-sample delays
collapse to single taps.
"""

import json
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .config import parse_kv_config
from .signal_io import Waveform, read_wav, write_wav

SPEED_OF_SOUND = 343.0
_SINC_HALF_WIDTH = 40  # taps on each side of the fractional-delay kernel


def default_room_config():
    text = resources.files("fastsep.data").joinpath("room_defaults.cfg").read_text()
    return parse_kv_config(text)


@dataclass
class RoomSpec:
    """Rectangular room with microphone and source layout."""

    dimensions: np.ndarray  # (3,) meters
    mic_positions: np.ndarray  # (M, 3)
    source_positions: np.ndarray  # (J, 3)
    absorption: float  # uniform wall absorption in (0, 1]
    target_rt60: float  # seconds
    sample_rate: int
    max_image_order: int

    def __post_init__(self):
        self.dimensions = np.asarray(self.dimensions, dtype=np.float64)
        self.mic_positions = np.atleast_2d(np.asarray(self.mic_positions, dtype=np.float64))
        self.source_positions = np.atleast_2d(
            np.asarray(self.source_positions, dtype=np.float64)
        )
        if self.dimensions.shape != (3,) or np.any(self.dimensions <= 0):
            raise ValueError("room dimensions must be three positive lengths")
        for name, pos in (("mic", self.mic_positions), ("source", self.source_positions)):
            if pos.shape[1] != 3:
                raise ValueError(f"{name} positions must be (n, 3)")
            if np.any(pos <= 0) or np.any(pos >= self.dimensions):
                raise ValueError(f"every {name} position must lie strictly inside the room")
        if not 0 < self.absorption <= 1:
            raise ValueError("absorption must be in (0, 1]")
        if self.target_rt60 <= 0:
            raise ValueError("target_rt60 must be positive")
        if self.max_image_order < 0:
            raise ValueError("max_image_order must be nonnegative")

    @classmethod
    def for_rt60(cls, target_rt60, sample_rate, geometry=None):
        """Build a spec from the default geometry and a reverberation target.

        Uniform absorption starts from the Eyring relation
        ``alpha = 1 - exp(-0.161 V / (S T60))`` and is then calibrated by
        bisection so the Schroeder-measured RT60 of a probe impulse response
        hits the target (small dry rooms decay faster early on than the
        diffuse-field formulas assume). The image order is chosen so
        reflections cover the truncated RIR span of 1.5 x RT60.
        """
        geo = dict(default_room_config())
        if geometry:
            geo.update(geometry)
        dims = np.asarray(geo["room_dimensions"], dtype=np.float64)
        volume = float(np.prod(dims))
        surface = 2.0 * float(dims[0] * dims[1] + dims[1] * dims[2] + dims[0] * dims[2])
        alpha = 1.0 - np.exp(-0.161 * volume / (surface * target_rt60))
        alpha = float(np.clip(alpha, 1e-4, 0.9999))
        # reflection budget: axial images along the longest dimension bounce
        # once per dimension length, so this covers the truncated RIR span
        span = 1.5 * target_rt60 * SPEED_OF_SOUND
        order = int(np.ceil(span / float(dims.max()))) + 2

        def build(a):
            return cls(
                dimensions=dims,
                mic_positions=np.asarray(geo["mic_positions"], dtype=np.float64),
                source_positions=np.asarray(geo["source_positions"], dtype=np.float64),
                absorption=a,
                target_rt60=float(target_rt60),
                sample_rate=int(sample_rate),
                max_image_order=order,
            )

        return build(_calibrate_absorption(build, alpha, float(target_rt60)))

    def to_dict(self):
        return {
            "dimensions": self.dimensions.tolist(),
            "mic_positions": self.mic_positions.tolist(),
            "source_positions": self.source_positions.tolist(),
            "absorption": self.absorption,
            "target_rt60": self.target_rt60,
            "sample_rate": self.sample_rate,
            "max_image_order": self.max_image_order,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class Scene:
    """One simulated recording: mixture, ground-truth images, labels."""

    spec: RoomSpec
    rirs: np.ndarray  # (J, M, rir_len)
    mixture: Waveform  # (M, L)
    source_images: list  # J waveforms of shape (M, L)
    labels: list  # true class index per source
    seed: int = 0


def _calibrate_absorption(build, alpha_guess, target_rt60, tolerance=0.05, steps=9):
    """Bisect the uniform absorption until a probe RIR measures on target.

    Measured RT60 decreases in the absorption over the usable range, so
    bisection between the analytic guess and near-total absorption homes in
    with a handful of probe RIRs; the closest probed value wins if the target
    sits below the geometry's measurable floor.
    """
    def measured(a):
        rir = image_method_rir(build(a), 0, 0)
        try:
            return estimate_rt60(rir, build(a).sample_rate)
        except ValueError:
            return 0.0  # decay too fast for the fit window

    lo, hi = 1e-3, 0.97
    best_alpha, best_error = None, np.inf

    def probe(a):
        nonlocal best_alpha, best_error
        value = measured(a)
        error = abs(value - target_rt60)
        if error < best_error:
            best_alpha, best_error = a, error
        return value

    current = float(np.clip(alpha_guess, lo, hi))
    value = probe(current)
    if abs(value / target_rt60 - 1.0) <= tolerance:
        return current
    if value > target_rt60:
        lo = current
    else:
        hi = current
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        value = probe(mid)
        if abs(value / target_rt60 - 1.0) <= tolerance:
            return mid
        if value > target_rt60:
            lo = mid
        else:
            hi = mid
    if best_error / target_rt60 > 0.25:
        warnings.warn(
            f"absorption calibration reached measured RT60 within "
            f"{best_error / target_rt60:.0%} of the {target_rt60:.3f}s target",
            stacklevel=2,
        )
    return best_alpha


def image_method_rir(spec, source_index, mic_index):
    """Room impulse response between one source and one microphone.

    ``max_image_order`` bounds the total reflection count per image, so
    order 0 keeps the direct path only. The response is truncated at
    1.5 x target RT60 (at least covering the direct path).
    """
    fs = spec.sample_rate
    c = SPEED_OF_SOUND
    src = spec.source_positions[source_index]
    mic = spec.mic_positions[mic_index]
    dims = spec.dimensions
    reflection = np.sqrt(1.0 - spec.absorption)

    n_taps = int(np.ceil(1.5 * spec.target_rt60 * fs))
    direct = np.linalg.norm(src - mic)
    n_taps = max(n_taps, int(np.ceil(direct / c * fs)) + 2 * _SINC_HALF_WIDTH + 2)
    rir = np.zeros(n_taps)

    order = spec.max_image_order
    half = order // 2 + 2
    grid = np.arange(-half, half + 1, dtype=np.float64)
    rx, ry, rz = np.meshgrid(grid, grid, grid, indexing="ij")
    r = np.stack([rx, ry, rz], axis=-1).reshape(-1, 3)  # (K, 3)
    direct_amp = 1.0 / (4.0 * np.pi * max(direct, 1e-3))

    for p in np.ndindex(2, 2, 2):
        p = np.asarray(p, dtype=np.float64)
        # image coordinate along each axis: (1 - 2p) src + 2 r L
        images = (1.0 - 2.0 * p) * src + 2.0 * r * dims
        dist = np.linalg.norm(images - mic, axis=1)
        delay = dist / c * fs
        n_reflections = np.sum(np.abs(r + p), axis=1) + np.sum(np.abs(r), axis=1)
        amp = reflection**n_reflections / (4.0 * np.pi * np.maximum(dist, 1e-3))
        keep = (
            (n_reflections <= order)
            & (delay < n_taps - _SINC_HALF_WIDTH - 1)
            & (amp > 1e-5 * direct_amp)
        )
        if not np.any(keep):
            continue
        _add_fractional_impulses(delay[keep], amp[keep], rir)
    return rir


def _add_fractional_impulses(delays, amps, out):
    """Scatter windowed-sinc kernels for many fractional delays at once."""
    centers = np.round(delays).astype(np.int64)
    offsets = np.arange(-_SINC_HALF_WIDTH, _SINC_HALF_WIDTH + 1)
    idx = centers[:, None] + offsets[None, :]
    t = idx - delays[:, None]
    kernels = amps[:, None] * np.sinc(t) * 0.5 * (
        1.0 + np.cos(np.pi * t / (_SINC_HALF_WIDTH + 1))
    )
    valid = (idx >= 0) & (idx < out.size)
    np.add.at(out, idx[valid], kernels[valid])


def estimate_rt60(rir, sample_rate, decay_range=(-15.0, -35.0)):
    """RT60 via Schroeder backward integration of the energy decay curve.

    The decay time between the two ``decay_range`` levels (default -15 to
    -35 dB, read off the EDC's level crossings) is extrapolated to a 60 dB
    decay. On an exponentially decaying response this recovers the true decay
    rate exactly regardless of the chosen band.
    """
    energy = rir.astype(np.float64) ** 2
    edc = np.cumsum(energy[::-1])[::-1]
    total = edc[0]
    if total <= 0:
        raise ValueError("impulse response has zero energy")
    with np.errstate(divide="ignore"):
        edc_db = 10.0 * np.log10(edc / total)
    hi, lo = decay_range
    if not np.any(edc_db <= lo):
        raise ValueError("decay range not represented in the impulse response")
    t_hi = int(np.argmax(edc_db <= hi))
    t_lo = int(np.argmax(edc_db <= lo))
    if t_lo <= t_hi:
        raise ValueError("decay range not represented in the impulse response")
    return 60.0 * (t_lo - t_hi) / sample_rate / (hi - lo)


def make_scene(spec, sources, labels, seed=0, position_jitter=0.0):
    """Convolve labeled source signals into a multichannel scene.

    Args:
        spec: RoomSpec; its source slots must match len(sources).
        sources: list of mono Waveforms at the spec's sample rate.
        labels: class index per source.
        seed: recorded in the scene and used for the optional jitter.
        position_jitter: uniform +/- meters applied to source positions
            (kept strictly inside the room).

    Returns:
        Scene whose mixture equals the sample-wise sum of the source images.
    """
    if len(sources) != spec.source_positions.shape[0]:
        raise ValueError("source count does not match the room spec")
    if len(labels) != len(sources):
        raise ValueError("one label per source required")
    for wave in sources:
        if wave.sample_rate != spec.sample_rate:
            raise ValueError("source sample rate differs from the room spec")
        if wave.n_channels != 1:
            raise ValueError("scene sources must be mono")

    if position_jitter > 0:
        rng = np.random.default_rng(seed)
        jitter = rng.uniform(-position_jitter, position_jitter, size=spec.source_positions.shape)
        moved = spec.source_positions + jitter
        margin = 0.05
        moved = np.clip(moved, margin, spec.dimensions - margin)
        spec = RoomSpec(
            spec.dimensions,
            spec.mic_positions,
            moved,
            spec.absorption,
            spec.target_rt60,
            spec.sample_rate,
            spec.max_image_order,
        )

    n_mics = spec.mic_positions.shape[0]
    rirs = [
        [image_method_rir(spec, j, m) for m in range(n_mics)] for j in range(len(sources))
    ]
    rir_len = max(len(r) for row in rirs for r in row)
    rirs = np.stack(
        [[np.pad(r, (0, rir_len - len(r))) for r in row] for row in rirs]
    )

    total_len = max(w.n_samples for w in sources) + rir_len - 1
    images = []
    for j, wave in enumerate(sources):
        chans = np.zeros((n_mics, total_len))
        for m in range(n_mics):
            conv = fftconvolve(wave.channel(0), rirs[j, m])
            chans[m, : conv.size] = conv
        images.append(Waveform(chans, spec.sample_rate))
    mixture = Waveform(sum(img.samples for img in images), spec.sample_rate)
    return Scene(spec, rirs, mixture, images, list(labels), seed)


def build_toy_suite(
    n_scenes,
    n_classes,
    duration,
    seed,
    rt60=0.078,
    sample_rate=16000,
    position_jitter=0.08,
    room_spec=None,
):
    """Deterministic batch of two-source scenes with distinct toy classes."""
    spec = room_spec or RoomSpec.for_rt60(rt60, sample_rate)
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(n_scenes):
        classes = [int(c) for c in rng.choice(n_classes, size=2, replace=False)]
        scene_seed = int(rng.integers(0, 2**31 - 1))
        sources = [
            toy_corpus(n_classes, 1, duration, seed=scene_seed + 7 * c,
                       sample_rate=sample_rate)[c][0]
            for c in classes
        ]
        scenes.append(
            make_scene(spec, sources, classes, seed=scene_seed,
                       position_jitter=position_jitter)
        )
    return scenes


def save_scene(scene, directory):
    """Persist a scene as mixture.wav, src<j>_img.wav and scene.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_wav(directory / "mixture.wav", scene.mixture)
    for j, img in enumerate(scene.source_images):
        write_wav(directory / f"src{j}_img.wav", img)
    meta = {
        "room": scene.spec.to_dict(),
        "labels": scene.labels,
        "seed": scene.seed,
    }
    (directory / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_scene(directory):
    """Load a persisted scene directory (RIRs are not persisted)."""
    directory = Path(directory)
    meta = json.loads((directory / "scene.json").read_text())
    spec = RoomSpec.from_dict(meta["room"])
    mixture = read_wav(directory / "mixture.wav")
    images = []
    for j in range(len(meta["labels"])):
        images.append(read_wav(directory / f"src{j}_img.wav"))
    return Scene(spec, None, mixture, images, meta["labels"], meta.get("seed", 0))


# ---------------------------------------------------------------------------
# toy corpus

_BASE_PITCHES = [110.0, 145.0, 190.0, 250.0, 320.0, 420.0, 550.0, 700.0]
_FORMANT_CONTRAST = 4.0  # emphasized-band gain over the baseline comb

# vowel-register banks, one per class, all within the resolvable band
_FORMANT_BANKS = [
    [700.0, 1800.0, 3200.0],
    [550.0, 1300.0, 2500.0],
    [900.0, 2200.0, 3600.0],
    [650.0, 1550.0, 2900.0],
    [800.0, 2000.0, 3400.0],
    [500.0, 1200.0, 2300.0],
    [950.0, 2400.0, 3800.0],
    [600.0, 1700.0, 3000.0],
]


def _class_formants(class_index, rng):
    """Per-class pitch register and formant bank."""
    base = _BASE_PITCHES[class_index % len(_BASE_PITCHES)]
    return base, np.array(_FORMANT_BANKS[class_index % len(_FORMANT_BANKS)])


def _formant_noise(n, fs, formant, bandwidth, rng):
    """White noise spectrally shaped by a formant resonance (breathiness)."""
    noise = rng.standard_normal(n)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    envelope = np.exp(-((freqs - formant) ** 2) / (2.0 * (1.5 * bandwidth) ** 2)) + 0.15
    shaped = np.fft.irfft(spectrum * envelope, n)
    rms = np.sqrt(np.mean(shaped**2))
    return shaped / max(rms, 1e-12)


def _harmonic_syllable(n, fs, pitch, formant, bandwidth, rng):
    """One vowel-like segment: softly gliding harmonics plus breath noise."""
    t = np.arange(n) / fs
    glide = 2.0 ** (rng.uniform(-0.15, 0.15) / 12.0 * t / max(t[-1], 1e-6))
    vibrato = 1.0 + 0.003 * np.sin(2 * np.pi * rng.uniform(4.0, 7.0) * t)
    inst_freq = pitch * glide * vibrato
    phase = 2 * np.pi * np.cumsum(inst_freq) / fs
    out = np.zeros(n)
    n_harmonics = int(min(30, (0.45 * fs) / pitch))
    for h in range(1, n_harmonics + 1):
        freq = h * pitch
        # multiplicative formant emphasis on a 1/sqrt(h) comb: the comb keeps
        # all of a source's bins co-modulated (what couples frequencies during
        # separation) while the moving emphasis carries identity and keeps the
        # spectrogram above rank two
        emphasis = np.exp(-((freq - formant) ** 2) / (2.0 * bandwidth**2))
        gain = (1.0 + _FORMANT_CONTRAST * emphasis) / h**0.5
        out += gain * np.sin(h * phase)
    # broadband breath component keeps every frequency bin identifiable
    voiced_rms = np.sqrt(np.mean(out**2))
    out += 0.35 * voiced_rms * _formant_noise(n, fs, formant, bandwidth, rng)
    # attack / release envelope with a randomized hold level
    env = np.ones(n)
    attack = max(int(0.02 * fs), 1)
    env[:attack] = np.linspace(0.0, 1.0, attack)
    env[-attack:] *= np.linspace(1.0, 0.0, attack)
    env *= 0.6 + 0.4 * np.sin(np.pi * np.linspace(0, 1, n)) ** rng.uniform(0.3, 1.5)
    return out * env


def toy_utterance(class_index, duration, sample_rate, rng):
    """Synthesize one utterance: a random sequence of class-specific vowels."""
    n_total = int(round(duration * sample_rate))
    pitch, formants = _class_formants(class_index, rng)
    out = np.zeros(n_total)
    pos = 0
    tempo = rng.uniform(0.75, 1.5)  # utterance-level speaking rate
    while pos < n_total:
        syl_len = int(rng.uniform(0.22, 0.4) * tempo * sample_rate)
        gap_len = int(rng.uniform(0.02, 0.09) * tempo * sample_rate)
        syl_len = min(syl_len, n_total - pos)
        if syl_len < int(0.05 * sample_rate):
            break
        formant = formants[rng.integers(len(formants))] * rng.uniform(0.96, 1.04)
        bandwidth = rng.uniform(250.0, 450.0)
        # per-syllable pitch moves on a small discrete grid: few enough comb
        # positions to learn per class, too many for a rank-2 variance model
        syl_pitch = pitch * 2.0 ** (rng.integers(-1, 2) / 12.0)
        out[pos : pos + syl_len] = _harmonic_syllable(
            syl_len, sample_rate, syl_pitch, formant, bandwidth, rng
        )
        pos += syl_len + gap_len
    # slow prosody envelope shared by the whole spectrum
    t = np.arange(n_total) / sample_rate
    prosody = 1.0
    for _ in range(3):
        prosody = prosody + rng.uniform(0.1, 0.35) * np.sin(
            2 * np.pi * rng.uniform(0.4, 1.6) * t + rng.uniform(0, 2 * np.pi)
        )
    out *= np.maximum(prosody, 0.25)
    rms = np.sqrt(np.mean(out**2))
    if rms > 0:
        out *= 0.1 / rms
    # low broadband floor so no time-frequency cell is exactly silent
    out += 1e-3 * rng.standard_normal(n_total)
    return out


def toy_corpus(n_classes, utterances_per_class, duration, seed, sample_rate=16000):
    """Deterministic labeled toy corpus of vowel-sequence signals.

    Each class has a distinct pitch register and formant bank, so classes are
    separable by spectral shape while individual utterances move through
    several spectral states (which keeps their spectrograms well above
    rank 2).

    Returns:
        list of (Waveform, class_index) pairs, grouped by class.
    """
    if n_classes > len(_BASE_PITCHES):
        raise ValueError(f"at most {len(_BASE_PITCHES)} toy classes are defined")
    rng = np.random.default_rng(seed)
    corpus = []
    for cls in range(n_classes):
        for _ in range(utterances_per_class):
            samples = toy_utterance(cls, duration, sample_rate, rng)
            corpus.append((Waveform(samples[np.newaxis, :], sample_rate), cls))
    return corpus
