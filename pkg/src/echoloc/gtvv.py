"""Robust estimation of the generalized velocity vector of an HOA recording.

The frequency-domain velocity vector (the relative transfer function of the
HOA channel vector with respect to a max-directivity beamformer output) is
estimated per bin by least squares over a sliding buffer of weighted
cross-spectra, so that a constant noise floor is absorbed by an explicit
intercept.  Its inverse transform to the lag domain (the GTVV) concentrates
the direct path at lag 0 and each early reflection at its TDoA, which is what
the downstream peak picker consumes.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .sphharm import (
    BeamformerWeights,
    Direction,
    UndecodableError,
    max_directivity_beamformer,
    num_channels,
    sh_eval,
)
from .stft import Spectrogram, StftConfig, spectrum_to_lag

__all__ = [
    "GtvvConfig",
    "GtvvFrame",
    "Wavefront",
    "WavefrontSet",
    "correlation_weights",
    "accumulate_bin",
    "solve_gfvv_bin",
    "estimate_gtvv",
    "analytic_gfvv",
    "render_wavefronts",
    "pseudo_intensity_direction",
]


@dataclass(frozen=True)
class GtvvConfig:
    """Estimator parameters.

    ``buffer_len`` frames of cross-spectra feed each per-bin least-squares
    solve (default 16 frames = 0.5 s at the default STFT hop).  ``band_hz``
    optionally restricts the inverse transform to a frequency band; the lag
    spectrum is renormalized so delta amplitudes are preserved.  Disabled by
    default: brick-wall banding smears the lag structure and is only worth
    it on noisy real-world recordings.
    """

    buffer_len: int = 16
    eps: float = 1e-10
    steer_update: str = "previous_doa"  # or "fixed"
    band_hz: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.buffer_len < 2:
            raise ValueError("buffer_len must be >= 2")
        if self.steer_update not in ("fixed", "previous_doa"):
            raise ValueError(f"unknown steer_update policy {self.steer_update!r}")


@dataclass(frozen=True)
class GtvvFrame:
    """Velocity vector of one analysis frame.

    Attributes
    ----------
    v_freq : ndarray ((L+1)**2, n_bins), complex
    v_time : ndarray ((L+1)**2, fft_len), real
        Lag-domain transform of ``v_freq`` (lag 0 first, circular).
    sigma : ndarray ((L+1)**2, n_bins), complex
        Per-bin noise cross-spectrum intercepts.
    steer : Direction
        Steering used for the beamformer reference.
    frame_index : int
    bin_valid : ndarray (n_bins,), bool
        False where the buffer carried no usable energy.
    """

    v_freq: np.ndarray
    v_time: np.ndarray
    sigma: np.ndarray
    steer: Direction
    frame_index: int
    bin_valid: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class Wavefront:
    """One plane wavefront: arrival direction, absolute ToA, gain."""

    direction: Direction
    toa: float
    gain: float


class WavefrontSet:
    """Direct path plus early echoes, ordered by time of arrival.

    The first wavefront must be the earliest and have positive gain; used as
    the analytic forward model in tests and by the simulator's ground truth.
    """

    def __init__(self, wavefronts: Sequence[Wavefront]):
        wavefronts = list(wavefronts)
        if not wavefronts:
            raise ValueError("need at least the direct wavefront")
        if any(w.toa < wavefronts[0].toa for w in wavefronts):
            raise ValueError("direct path must arrive first")
        if wavefronts[0].gain <= 0:
            raise ValueError("direct-path gain must be positive")
        self.wavefronts = wavefronts

    def __len__(self):
        return len(self.wavefronts)

    @property
    def directions(self):
        return [w.direction for w in self.wavefronts]

    @property
    def toas(self):
        return np.array([w.toa for w in self.wavefronts])

    @property
    def gains(self):
        return np.array([w.gain for w in self.wavefronts])

    @property
    def relative_delays(self):
        """TDoAs of the echoes with respect to the direct path."""
        t = self.toas
        return t[1:] - t[0]

    @property
    def relative_gains(self):
        g = self.gains
        return g[1:] / g[0]

    def sh_targets(self, order):
        """Stacked y_n vectors, shape (n_wavefronts, (L+1)**2)."""
        return np.stack([sh_eval(w.direction, order) for w in self.wavefronts])


def correlation_weights(spec: Spectrogram) -> np.ndarray:
    """Per-bin Pearson correlation of adjacent frames across channels.

    Bins whose content persists into the next frame (sound attacks rather
    than reverberant tails) get weights near 1.  Negative correlations are
    floored at 0; the last frame copies its predecessor's weights.

    Returns
    -------
    ndarray, shape (n_frames, n_bins), values in [0, 1]
    """
    if spec.n_frames < 2:
        raise ValueError("need at least two frames for correlation weights")
    b = spec.data
    inner = np.real(np.sum(np.conj(b[:-1]) * b[1:], axis=1))
    norms = np.linalg.norm(b, axis=1)
    denom = norms[:-1] * norms[1:]
    w = np.zeros_like(inner)
    np.divide(inner, denom, out=w, where=denom > 0)
    w = np.clip(w, 0.0, 1.0)
    return np.concatenate([w, w[-1:]], axis=0)


def accumulate_bin(buffer, weights, channel, beamformer: BeamformerWeights):
    """Cross-spectrum rows for one channel of one bin.

    Reference formulation used by the tests; :func:`estimate_gtvv` computes
    the same quantities vectorized over all channels and bins.

    Parameters
    ----------
    buffer : ndarray (T, n_channels), complex
        STFT values of one frequency bin over the T buffered frames, most
        recent last.
    weights : ndarray (T,), real
        Time-frequency weights of those frames at this bin.
    channel : int
        ACN channel index whose velocity-vector entry is being estimated.
    beamformer : BeamformerWeights

    Returns
    -------
    a : ndarray (T,), complex
        Beamformed reference cross-spectra (rows of the weighted
        cross-spectral matrix times the beamformer).
    phi : ndarray (T,), real
        Weighted power spectrum of the channel.
    """
    bt = np.asarray(weights)[:, None] * np.asarray(buffer)
    ref = bt @ beamformer.weights
    a = ref * np.conj(bt[:, channel])
    phi = np.abs(bt[:, channel]) ** 2
    return a, phi


def solve_gfvv_bin(a, phi, eps=1e-10):
    """Least-squares fit of ``phi = a * v + sigma`` over the buffered frames.

    Solved through the 2x2 complex normal equations; each Gram diagonal
    entry gets its own relative Tikhonov guard so low-energy bins are not
    biased by the constant intercept column.  An all-zero bin yields
    ``(0, 0)``.

    Returns
    -------
    v, sigma : complex
    """
    a = np.asarray(a, dtype=complex)
    phi = np.asarray(phi, dtype=complex)
    T = a.shape[0]
    if T < 2:
        raise ValueError("need at least two rows")
    g11 = float(np.sum(np.abs(a) ** 2))
    g12 = complex(np.sum(np.conj(a)))
    r1 = complex(np.sum(np.conj(a) * phi))
    r2 = complex(np.sum(phi))
    g11r = g11 * (1.0 + eps)
    g22r = T * (1.0 + eps)
    det = g11r * g22r - (g12 * np.conj(g12)).real
    if g11 <= 0 or det <= 0:
        return 0j, 0j
    v = (g22r * r1 - g12 * r2) / det
    sigma = (g11r * r2 - np.conj(g12) * r1) / det
    return complex(v), complex(sigma)


def _band_mask_and_scale(config: StftConfig, band_hz):
    freqs = np.fft.rfftfreq(config.fft_len, d=1.0 / config.sample_rate)
    mask = (freqs >= band_hz[0]) & (freqs <= band_hz[1])
    # two-sided bin multiplicity: DC and Nyquist count once
    mult = np.full(freqs.shape, 2.0)
    mult[0] = 1.0
    if config.fft_len % 2 == 0:
        mult[-1] = 1.0
    kept = float(np.sum(mult[mask]))
    if kept <= 0:
        raise ValueError("band_hz keeps no bins")
    return mask, config.fft_len / kept


def estimate_gtvv(spec: Spectrogram, k: int, steer: Direction, config: GtvvConfig,
                  weights=None) -> GtvvFrame:
    """Velocity-vector estimate at frame ``k`` from the preceding buffer.

    Parameters
    ----------
    spec : Spectrogram
    k : int
        Frame index; needs ``k >= buffer_len - 1``.
    steer : Direction
        Beamformer steering (roughly the source DoA; the estimate tolerates
        coarse steering).
    config : GtvvConfig
    weights : ndarray (n_frames, n_bins), optional
        Precomputed :func:`correlation_weights`; computed on the fly if
        omitted.

    Returns
    -------
    GtvvFrame
    """
    T = config.buffer_len
    if k < T - 1:
        raise ValueError(f"frame {k} has no full buffer of {T} frames")
    if k >= spec.n_frames:
        raise ValueError("frame index out of range")
    if weights is None:
        weights = correlation_weights(spec)

    order = int(round(np.sqrt(spec.n_channels))) - 1
    bf = max_directivity_beamformer(steer, order)

    buf = spec.data[k - T + 1:k + 1]                      # (T, C, F)
    bt = weights[k - T + 1:k + 1][:, None, :] * buf       # weighted
    ref = np.einsum("c,tcf->tf", bf.weights, bt)          # beamformed reference
    a = ref[:, None, :] * np.conj(bt)                     # (T, C, F)
    phi = np.abs(bt) ** 2

    g11 = np.sum(np.abs(a) ** 2, axis=0)
    g12 = np.sum(np.conj(a), axis=0)
    r1 = np.sum(np.conj(a) * phi, axis=0)
    r2 = np.sum(phi, axis=0)
    g11r = g11 * (1.0 + config.eps)
    g22r = T * (1.0 + config.eps)
    det = g11r * g22r - np.abs(g12) ** 2
    ok = (g11 > 0) & (det > 0)
    safe_det = np.where(ok, det, 1.0)
    v_freq = np.where(ok, (g22r * r1 - g12 * r2) / safe_det, 0.0)
    sigma = np.where(ok, (g11r * r2 - np.conj(g12) * r1) / safe_det, 0.0)
    bin_valid = np.any(ok, axis=0)

    if config.band_hz is not None:
        mask, scale = _band_mask_and_scale(spec.config, config.band_hz)
        v_for_lag = np.where(mask[None, :], v_freq, 0.0) * scale
    else:
        v_for_lag = v_freq
    v_time = spectrum_to_lag(v_for_lag, spec.config.fft_len)

    return GtvvFrame(v_freq=v_freq, v_time=v_time, sigma=sigma, steer=steer,
                     frame_index=k, bin_valid=bin_valid)


def analytic_gfvv(wavefronts: WavefrontSet, beamformer: BeamformerWeights, freq_hz):
    """Noise-free velocity vector of a wavefront set, evaluated directly.

    Computes ``sum_n a_n(f) y_n / sum_n a_n(f) beta_n`` with
    ``a_n(f) = h_n exp(-2j pi f toa_n)``; independent of the source signal.

    Parameters
    ----------
    wavefronts : WavefrontSet
    beamformer : BeamformerWeights
    freq_hz : float or ndarray (F,)

    Returns
    -------
    ndarray ((L+1)**2,) complex, or ((L+1)**2, F) for an array of frequencies.

    Raises
    ------
    ZeroDivisionError
        If the beamformed denominator falls below 1e-12 in modulus
        (a beamformer null coincides with the wavefront sum).
    """
    f = np.asarray(freq_hz, dtype=float)
    scalar = f.ndim == 0
    f = np.atleast_1d(f)
    Y = wavefronts.sh_targets(beamformer.order)          # (N, C)
    beta = Y @ beamformer.weights                         # (N,)
    phases = np.exp(-2j * np.pi * np.outer(wavefronts.toas, f))  # (N, F)
    amps = wavefronts.gains[:, None] * phases
    numer = Y.T @ amps                                    # (C, F)
    denom = beta @ amps                                   # (F,)
    if np.any(np.abs(denom) < 1e-12):
        raise ZeroDivisionError("beamformed denominator vanishes at a requested frequency")
    v = numer / denom[None, :]
    return v[:, 0] if scalar else v


def render_wavefronts(wavefronts: WavefrontSet, order: int, config: StftConfig,
                      spectra, noise_std: float = 0.0, rng=None) -> Spectrogram:
    """Directly synthesize STFT frames of a wavefront set (test forward model).

    Each frame's channel vector is ``spectra[k, f] * sum_n a_n(f) y_n`` plus
    optional circular white noise: the exact rank-one model the per-bin
    estimator assumes, bypassing waveform rendering and window leakage.

    Parameters
    ----------
    spectra : ndarray (n_frames, n_bins), complex
        Per-frame source spectra.
    noise_std : float
        Standard deviation per complex entry of additive noise.
    """
    spectra = np.asarray(spectra, dtype=complex)
    n_frames, n_bins = spectra.shape
    if n_bins != config.n_bins:
        raise ValueError("spectra bin count does not match the STFT config")
    freqs = np.fft.rfftfreq(config.fft_len, d=1.0 / config.sample_rate)
    Y = wavefronts.sh_targets(order)                      # (N, C)
    phases = np.exp(-2j * np.pi * np.outer(wavefronts.toas, freqs))
    transfer = Y.T @ (wavefronts.gains[:, None] * phases)  # (C, F)
    data = spectra[:, None, :] * transfer[None, :, :]
    if noise_std > 0.0:
        rng = np.random.default_rng(rng)
        data = data + noise_std * (
            rng.standard_normal(data.shape) + 1j * rng.standard_normal(data.shape)
        ) / np.sqrt(2.0)
    starts = np.arange(n_frames) * config.hop
    return Spectrogram(data, starts, config)


def pseudo_intensity_direction(spec: Spectrogram, k: int, buffer_len: int) -> Direction:
    """Coarse DoA from the first-order pseudo-intensity over a frame buffer.

    Used to bootstrap beamformer steering before any decoded DoA exists.
    """
    if spec.n_channels < 4:
        raise UndecodableError("pseudo-intensity needs at least first-order channels")
    buf = spec.data[max(0, k - buffer_len + 1):k + 1]
    w_conj = np.conj(buf[:, 0, :])
    # ACN first-order channels: 1 = Y, 2 = Z, 3 = X
    x = np.sum(np.real(w_conj * buf[:, 3, :]))
    y = np.sum(np.real(w_conj * buf[:, 1, :]))
    z = np.sum(np.real(w_conj * buf[:, 2, :]))
    vec = np.array([x, y, z])
    if np.linalg.norm(vec) < 1e-18:
        raise UndecodableError("pseudo-intensity vector vanishes")
    return Direction.from_unit_vector(vec)
