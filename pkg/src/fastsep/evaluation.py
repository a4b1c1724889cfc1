"""Separation scoring: SDR/SIR/SAR decomposition, accuracy, runtime tables.

Every estimate is decomposed against the references by least-squares
projection onto the span of all references delayed by up to ``filter_length``
taps (the allowed-distortion convention):

    s_filt   = projection onto the assigned reference's delayed span,
    e_interf = projection onto all references minus s_filt,
    e_artif  = estimate minus the full projection,

    SDR = 10 log10 |s_filt|^2 / |e_interf + e_artif|^2,
    SIR = 10 log10 |s_filt|^2 / |e_interf|^2,
    SAR = 10 log10 |s_filt + e_interf|^2 / |e_artif|^2.

Estimates are matched to references by the permutation maximizing total SIR.
"""

import csv
import itertools
from dataclasses import dataclass

import numpy as np
from scipy.fft import next_fast_len
from scipy.linalg import toeplitz
from scipy.signal import fftconvolve

DB_CAP = 100.0
DEFAULT_FILTER_LENGTH = 512


@dataclass
class BssScores:
    """Per-source scores in dB, aligned to the reference order.

    ``permutation[k]`` is the estimate index assigned to reference k.
    """

    sdr: np.ndarray
    sir: np.ndarray
    sar: np.ndarray
    permutation: tuple


def _safe_db(num, den):
    if num <= 0:
        return -DB_CAP
    if den <= num * 10.0 ** (-DB_CAP / 10.0):
        return DB_CAP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CAP, DB_CAP))


class _DelayProjector:
    """Least-squares projection onto spans of delayed reference signals."""

    def __init__(self, references, filter_length):
        self.refs = references
        self.flen = filter_length
        n_refs, n_samples = references.shape
        self.out_len = n_samples + filter_length - 1
        nfft = next_fast_len(2 * self.out_len)
        spectra = np.fft.rfft(references, nfft)
        self.gram = np.empty((n_refs * filter_length, n_refs * filter_length))
        for i in range(n_refs):
            for k in range(n_refs):
                cc_ki = np.fft.irfft(spectra[k] * spectra[i].conj(), nfft)
                cc_ik = np.fft.irfft(spectra[i] * spectra[k].conj(), nfft)
                block = toeplitz(cc_ki[:filter_length], cc_ik[:filter_length])
                self.gram[
                    i * filter_length : (i + 1) * filter_length,
                    k * filter_length : (k + 1) * filter_length,
                ] = block
        self._nfft = nfft
        self._spectra = spectra

    def _crosscorr(self, target):
        tf = np.fft.rfft(target, self._nfft)
        rows = np.fft.irfft(tf[None, :] * self._spectra.conj(), self._nfft, axis=1)
        return rows[:, : self.flen].ravel()

    @staticmethod
    def _solve(gram, rhs):
        try:
            return np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(gram, rhs, rcond=None)[0]

    def project_all(self, target):
        """Projection of target onto the union of all delayed spans."""
        coeffs = self._solve(self.gram, self._crosscorr(target)).reshape(
            self.refs.shape[0], self.flen
        )
        out = np.zeros(self.out_len)
        for k in range(self.refs.shape[0]):
            out += fftconvolve(self.refs[k], coeffs[k])[: self.out_len]
        return out

    def project_single(self, target, j):
        """Projection of target onto reference j's delayed span only."""
        block = self.gram[
            j * self.flen : (j + 1) * self.flen, j * self.flen : (j + 1) * self.flen
        ]
        rhs = self._crosscorr(target)[j * self.flen : (j + 1) * self.flen]
        coeffs = self._solve(block, rhs)
        return fftconvolve(self.refs[j], coeffs)[: self.out_len]


def _as_signal_matrix(signals, name):
    mats = [np.asarray(s, dtype=np.float64).ravel() for s in signals]
    lengths = {m.size for m in mats}
    if len(lengths) != 1:
        raise ValueError(f"{name} must share one length, got {sorted(lengths)}")
    mat = np.stack(mats)
    energies = np.sum(mat**2, axis=1)
    if np.any(energies == 0):
        raise ValueError(f"zero-energy {name[:-1]} at index {int(np.argmin(energies))}")
    return mat


def bss_eval(estimates, references, filter_length=DEFAULT_FILTER_LENGTH):
    """Score estimated sources against reference source images.

    Args:
        estimates: sequence of 1-D estimated signals.
        references: sequence of 1-D reference signals of the same length;
            pairwise correlation must stay below 0.99.
        filter_length: allowed distortion filter taps.

    Returns:
        BssScores with the best permutation by total SIR (ties broken toward
        the lexicographically smallest assignment).
    """
    est = _as_signal_matrix(estimates, "estimates")
    refs = _as_signal_matrix(references, "references")
    if est.shape != refs.shape:
        raise ValueError("estimate and reference counts/lengths must match")
    n_src = refs.shape[0]

    unit = refs / np.linalg.norm(refs, axis=1, keepdims=True)
    corr = unit @ unit.T
    np.fill_diagonal(corr, 0.0)
    if np.any(np.abs(corr) >= 0.99):
        i, k = np.unravel_index(np.argmax(np.abs(corr)), corr.shape)
        raise ValueError(
            f"references {i} and {k} are near-collinear "
            f"(|corr| = {abs(corr[i, k]):.3f} >= 0.99)"
        )

    projector = _DelayProjector(refs, filter_length)
    sdr = np.empty((n_src, n_src))
    sir = np.empty((n_src, n_src))
    sar = np.empty((n_src, n_src))
    for i in range(n_src):
        full = projector.project_all(est[i])
        extended = np.zeros(projector.out_len)
        extended[: est.shape[1]] = est[i]
        e_artif = extended - full
        for j in range(n_src):
            s_filt = projector.project_single(est[i], j)
            e_interf = full - s_filt
            sdr[i, j] = _safe_db(np.sum(s_filt**2), np.sum((e_interf + e_artif) ** 2))
            sir[i, j] = _safe_db(np.sum(s_filt**2), np.sum(e_interf**2))
            sar[i, j] = _safe_db(np.sum(full**2), np.sum(e_artif**2))

    best, best_total = None, -np.inf
    for perm in itertools.permutations(range(n_src)):
        total = sum(sir[perm[k], k] for k in range(n_src))
        if total > best_total:
            best, best_total = perm, total
    return BssScores(
        sdr=np.array([sdr[best[k], k] for k in range(n_src)]),
        sir=np.array([sir[best[k], k] for k in range(n_src)]),
        sar=np.array([sar[best[k], k] for k in range(n_src)]),
        permutation=tuple(best),
    )


def classification_accuracy(trace, true_labels, mode="all", permutation=None):
    """Fraction of recorded class decisions matching the true labels.

    Args:
        trace: SeparationTrace with recorded class posteriors.
        true_labels: class index per reference source.
        mode: "all" scores every iteration, "final" only the last.
        permutation: BssScores-style tuple mapping reference k to estimate
            index; identity when omitted.

    Returns:
        Accuracy in [0, 1]. Argmax ties resolve to the lowest class index.
    """
    if mode not in ("all", "final"):
        raise ValueError(f"mode must be 'all' or 'final', got {mode!r}")
    decisions = trace.class_argmax()
    if mode == "final":
        decisions = decisions[-1:, :]
    n_sources = decisions.shape[1]
    if permutation is None:
        permutation = tuple(range(n_sources))
    labels_by_estimate = {permutation[k]: true_labels[k] for k in range(n_sources)}
    expected = np.array([labels_by_estimate[j] for j in range(n_sources)])
    return float(np.mean(decisions == expected[None, :]))


def runtime_report(traces_by_method):
    """Per-method runtime summary rows from separation traces."""
    rows = []
    for method, traces in traces_by_method.items():
        per_iter = np.concatenate([t.durations_ms for t in traces])
        totals = [t.durations_ms.sum() for t in traces]
        rows.append(
            {
                "method": method,
                "runtime_per_iteration_s": float(per_iter.mean()) / 1e3,
                "total_s": float(np.mean(totals)) / 1e3,
            }
        )
    return rows


def format_table(headers, rows):
    """Fixed-width text table; floats are rendered with 4 decimals."""
    def render(value):
        if isinstance(value, float):
            return f"{value:.4f}"
        return str(value)

    cells = [[render(row[h]) for h in headers] for row in rows]
    widths = [
        max(len(h), *(len(row[i]) for row in cells)) if cells else len(h)
        for i, h in enumerate(headers)
    ]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def write_csv(path, headers, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=headers)
        writer.writeheader()
        for row in rows:
            writer.writerow({h: row[h] for h in headers})
