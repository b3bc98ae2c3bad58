"""Multichannel short-time Fourier analysis with Tukey windowing.

Only the forward transform and a per-vector inverse to the lag domain are
provided; the pipeline never reconstructs signals.
"""

from dataclasses import dataclass

import numpy as np
from scipy.signal.windows import tukey

from .sphharm import order_from_channels

__all__ = ["StftConfig", "Spectrogram", "tukey_window", "stft_analyze", "spectrum_to_lag"]


@dataclass(frozen=True)
class StftConfig:
    """Analysis parameters; defaults give 0.128 s frames with 75% overlap."""

    sample_rate: float = 16000.0
    frame_len: int = 2048
    hop: int = 512
    tukey_alpha: float = 0.5
    fft_len: int = 2048

    def __post_init__(self):
        if self.hop > self.frame_len:
            raise ValueError("hop must not exceed frame_len")
        if self.fft_len < self.frame_len:
            raise ValueError("fft_len must be >= frame_len")
        if not 0.0 <= self.tukey_alpha <= 1.0:
            raise ValueError("tukey_alpha must be in [0, 1]")

    @property
    def n_bins(self):
        return self.fft_len // 2 + 1

    @property
    def frame_rate(self):
        return self.sample_rate / self.hop


class Spectrogram:
    """STFT frames of a multichannel signal.

    Attributes
    ----------
    data : ndarray, shape (n_frames, n_channels, n_bins), complex
    frame_starts : ndarray of int
        First sample index of each frame.
    config : StftConfig
    """

    def __init__(self, data, frame_starts, config):
        self.data = data
        self.frame_starts = np.asarray(frame_starts, dtype=int)
        self.config = config
        self.data.setflags(write=False)
        self.frame_starts.setflags(write=False)

    @property
    def n_frames(self):
        return self.data.shape[0]

    @property
    def n_channels(self):
        return self.data.shape[1]

    @property
    def n_bins(self):
        return self.data.shape[2]

    @property
    def times(self):
        """Frame timestamps (seconds) at frame centers."""
        return (self.frame_starts + self.config.frame_len / 2.0) / self.config.sample_rate

    @property
    def bin_freqs(self):
        return np.fft.rfftfreq(self.config.fft_len, d=1.0 / self.config.sample_rate)


def tukey_window(n, alpha):
    """Symmetric Tukey (tapered cosine) window of length ``n``.

    ``alpha = 0`` is rectangular, ``alpha = 1`` is a Hann window.
    """
    if n < 2:
        raise ValueError("window length must be >= 2")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    return tukey(n, alpha, sym=True)


def stft_analyze(signal, config):
    """Windowed real FFT of every complete frame of a multichannel signal.

    Parameters
    ----------
    signal : ndarray, shape (n_samples, n_channels)
        Real HOA samples; channel count must be (L+1)^2 for some L.
    config : StftConfig

    Returns
    -------
    Spectrogram
        Trailing samples that do not fill a frame are dropped.
    """
    signal = np.asarray(signal, dtype=float)
    if signal.ndim == 1:
        signal = signal[:, None]
    n_samples, n_channels = signal.shape
    order_from_channels(n_channels)  # raises on invalid channel count
    if n_samples < config.frame_len:
        raise ValueError(
            f"signal ({n_samples} samples) shorter than one frame ({config.frame_len})")

    window = tukey_window(config.frame_len, config.tukey_alpha)
    n_frames = (n_samples - config.frame_len) // config.hop + 1
    starts = np.arange(n_frames) * config.hop
    data = np.empty((n_frames, n_channels, config.n_bins), dtype=complex)
    for k, s in enumerate(starts):
        frame = signal[s:s + config.frame_len] * window[:, None]
        data[k] = np.fft.rfft(frame, n=config.fft_len, axis=0).T
    return Spectrogram(data, starts, config)


def spectrum_to_lag(spectrum, fft_len=None):
    """Inverse real FFT of a one-sided spectrum to the (circular) lag domain.

    Lag 0 comes first; negative lags wrap to the upper half of the output.

    Parameters
    ----------
    spectrum : array_like, complex
        One-sided bins 0..fft_len/2 along the last axis.
    fft_len : int, optional
        Output length; defaults to ``2 * (n_bins - 1)``.
    """
    spectrum = np.asarray(spectrum, dtype=complex)
    if not np.all(np.isfinite(spectrum)):
        raise ValueError("spectrum contains non-finite values")
    if fft_len is None:
        fft_len = 2 * (spectrum.shape[-1] - 1)
    return np.fft.irfft(spectrum, n=fft_len, axis=-1)
