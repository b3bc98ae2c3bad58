"""Per-frame wavefront observations from a velocity-vector frame.

The direct path is decoded from the lag-0 column; reflections come from
selective peak picking on the lag-norm profile, with suppression of the
higher-order echo images that the geometric series of the beamformed ratio
places at integer multiples of each true TDoA.
"""

from dataclasses import dataclass

import numpy as np

from .gtvv import GtvvFrame
from .sphharm import Direction, UndecodableError, decode_direction

__all__ = [
    "PeakPickConfig",
    "EchoObservation",
    "extract_doa",
    "pick_reflection_peaks",
    "peaks_to_observations",
]


@dataclass(frozen=True)
class PeakPickConfig:
    """Reflection peak-picking parameters.

    ``max_delay`` bounds the searched TDoA range, ``min_rel_strength`` is the
    detection threshold relative to the lag-0 norm, ``harmonic_tol`` (samples)
    is the window used to reject peaks sitting at integer multiples of a
    stronger peak's lag.
    """

    max_delay: float = 0.030
    min_rel_strength: float = 0.1
    max_peaks: int = 5
    harmonic_tol: float = 2.0
    subsample: bool = True

    def __post_init__(self):
        if not 0.0 < self.min_rel_strength < 1.0:
            raise ValueError("min_rel_strength must be in (0, 1)")
        if self.max_delay <= 0:
            raise ValueError("max_delay must be positive")


@dataclass(frozen=True)
class EchoObservation:
    """One observed wavefront: direction, relative delay and strength.

    ``tau`` is 0 for the direct path and the TDoA (> 0) for reflections;
    ``strength`` is the decoded SH gain (relative amplitude for echoes).
    """

    direction: Direction
    tau: float
    strength: float
    frame_index: int
    kind: str  # "direct" or "reflection"

    def __post_init__(self):
        if self.kind not in ("direct", "reflection"):
            raise ValueError(f"unknown observation kind {self.kind!r}")
        if self.kind == "direct" and self.tau != 0.0:
            raise ValueError("direct-path observation must have tau == 0")
        if self.kind == "reflection" and self.tau <= 0.0:
            raise ValueError("reflection TDoA must be positive")


def extract_doa(frame: GtvvFrame) -> EchoObservation:
    """Direct-path DoA decoded from the lag-0 column of the GTVV.

    Raises :class:`UndecodableError` when the column carries no energy.
    """
    direction, gain = decode_direction(frame.v_time[:, 0])
    return EchoObservation(direction=direction, tau=0.0, strength=gain,
                           frame_index=frame.frame_index, kind="direct")


def _parabolic_refine(s, i):
    # vertex of the parabola through (i-1, i, i+1); offset clamped to +-0.5
    y0, y1, y2 = s[i - 1], s[i], s[i + 1]
    denom = y0 - 2.0 * y1 + y2
    if denom >= -1e-300:
        return float(i)
    offset = 0.5 * (y0 - y2) / denom
    return i + float(np.clip(offset, -0.5, 0.5))


def pick_reflection_peaks(frame: GtvvFrame, config: PeakPickConfig, sample_rate: float):
    """Candidate reflection peaks of the lag-norm profile.

    Local maxima of ``norm(v(t))`` over lags in (0, max_delay] are kept when
    they reach ``min_rel_strength`` of the lag-0 norm; peaks lying within
    ``harmonic_tol`` samples of an integer multiple (p >= 2) of a stronger
    kept peak's lag are dropped as higher-order ghosts; at most ``max_peaks``
    survive, strongest first.

    Returns
    -------
    list of (lag_seconds, column, strength)
        ``column`` is the real SH coefficient vector at the integer peak lag,
        ``strength`` the lag-norm there; ``lag_seconds`` is sub-sample
        refined when configured.
    """
    v = frame.v_time
    s = np.linalg.norm(v, axis=0)
    ref = s[0]
    if ref <= 0:
        return []
    max_lag = min(int(np.floor(config.max_delay * sample_rate)), v.shape[1] // 2 - 1)
    if max_lag < 1:
        return []

    # skip the direct peak's own shoulder: search from the first rise after
    # the initial descent, so ringing at the base of lag 0 is not picked up
    start = 1
    while start < max_lag and s[start + 1] <= s[start]:
        start += 1
    start += 1

    candidates = []
    for i in range(start, max_lag + 1):
        if s[i] >= s[i - 1] and s[i] >= s[i + 1] and s[i] >= config.min_rel_strength * ref:
            # plateau guard: count only the first sample of equal neighbours
            if s[i] == s[i - 1] and i > 1:
                continue
            candidates.append(i)

    candidates.sort(key=lambda i: s[i], reverse=True)
    kept = []
    for i in candidates:
        ghost = False
        for j in kept:
            p = max(2, int(round(i / j)))
            if abs(i - p * j) <= config.harmonic_tol:
                ghost = True
                break
        if not ghost:
            kept.append(i)
        if len(kept) == config.max_peaks:
            break

    peaks = []
    for i in kept:
        lag = _parabolic_refine(s, i) if config.subsample else float(i)
        peaks.append((lag / sample_rate, v[:, i].copy(), float(s[i])))
    return peaks


def peaks_to_observations(peaks, frame_index: int):
    """Decode peak columns into reflection observations, strongest first.

    Columns that cannot be decoded (near-zero or negative-gain) are skipped;
    the number of skips is returned for diagnostics.

    Returns
    -------
    observations : list of EchoObservation
    skipped : int
    """
    observations = []
    skipped = 0
    for lag, column, _strength in peaks:
        try:
            direction, gain = decode_direction(column)
        except UndecodableError:
            skipped += 1
            continue
        if gain <= 0:
            skipped += 1
            continue
        observations.append(EchoObservation(direction=direction, tau=float(lag),
                                            strength=float(gain),
                                            frame_index=frame_index, kind="reflection"))
    observations.sort(key=lambda o: o.strength, reverse=True)
    return observations, skipped
