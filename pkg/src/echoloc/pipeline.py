"""End-to-end localization pipeline and its metrics/emission plumbing.

Per recording: STFT -> correlation weights -> per-frame velocity vector ->
direct-path DoA + reflection peaks -> source/echo tracking -> block-wise ToA
solves -> per-frame (azimuth, elevation, range) estimates, with error
metrics whenever ground truth is available.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .dataio import TruthTable
from .gtvv import (GtvvConfig, correlation_weights, estimate_gtvv,
                   pseudo_intensity_direction)
from .ranging import (EmptySystemError, SolverConfig, assemble, solve_toa,
                      toa_to_positions)
from .sphharm import Direction, UndecodableError
from .stft import StftConfig, stft_analyze
from .tracking import (SourceTrack, TrackerConfig, confirmed_pairs,
                       reflections_update, source_update)
from .wavefront import (PeakPickConfig, extract_doa, peaks_to_observations,
                        pick_reflection_peaks)

__all__ = [
    "PipelineConfig",
    "FrameEstimate",
    "MetricsReport",
    "run_pipeline",
    "compute_metrics",
    "emit",
]


@dataclass(frozen=True)
class PipelineConfig:
    """Full pipeline configuration (all stages plus ranging policy)."""

    stft: StftConfig = field(default_factory=StftConfig)
    gtvv: GtvvConfig = field(default_factory=GtvvConfig)
    peaks: PeakPickConfig = field(default_factory=PeakPickConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    hypotheses: Tuple[str, ...] = ("DP", "HV")
    range_lb_m: float = 0.5
    range_ub_m: float = 6.0
    speed_of_sound: float = 343.0
    pair_policy: str = "stride"
    pair_stride: int = 16
    block_len: int = 256
    block_overlap: float = 0.5
    activity_gate_db: float = 35.0
    min_track_frames: int = 8

    def __post_init__(self):
        if not 0.0 < self.range_lb_m < self.range_ub_m:
            raise ValueError("need 0 < range_lb_m < range_ub_m")
        if not 0.0 <= self.block_overlap < 1.0:
            raise ValueError("block_overlap must be in [0, 1)")

    @property
    def toa_bounds(self):
        return (self.range_lb_m / self.speed_of_sound,
                self.range_ub_m / self.speed_of_sound)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        parts = {}
        for key, sub in (("stft", StftConfig), ("gtvv", GtvvConfig),
                         ("peaks", PeakPickConfig), ("tracker", TrackerConfig),
                         ("solver", SolverConfig)):
            if key in d:
                val = d.pop(key)
                parts[key] = val if isinstance(val, sub) else sub(**_tupled(val))
        if "hypotheses" in d:
            d["hypotheses"] = tuple(d["hypotheses"])
        return cls(**parts, **{k: v for k, v in d.items()})


def _tupled(d):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


@dataclass(frozen=True)
class FrameEstimate:
    """Per-frame localization output (angles in degrees, range in meters)."""

    frame_index: int
    time: float
    azimuth_deg: float
    elevation_deg: float
    range_m: float
    doa_valid: bool
    range_valid: bool


@dataclass
class MetricsReport:
    """Median/mean/std of absolute errors, pooled over all valid frames."""

    azimuth: dict
    elevation: dict
    range: dict
    n_frames_doa: int
    n_frames_range: int
    config: dict

    def to_dict(self):
        return {
            "azimuth_deg": self.azimuth,
            "elevation_deg": self.elevation,
            "range_m": self.range,
            "n_frames_doa": self.n_frames_doa,
            "n_frames_range": self.n_frames_range,
            "config": self.config,
        }


def _blocks(frames, block_len, overlap):
    n = len(frames)
    if n <= block_len:
        return [frames]
    step = max(1, int(round(block_len * (1.0 - overlap))))
    blocks = []
    start = 0
    while True:
        blocks.append(frames[start:start + block_len])
        if start + block_len >= n:
            break
        start += step
    return blocks


def run_pipeline(samples, config: PipelineConfig, truth: Optional[TruthTable] = None,
                 sample_rate: Optional[float] = None):
    """Run the full localization pipeline on an HOA recording.

    Parameters
    ----------
    samples : ndarray (n_samples, (L+1)**2)
        ACN/N3D HOA signal at ``config.stft.sample_rate``.
    truth : TruthTable, optional
        When given, a MetricsReport is computed against it.
    sample_rate : float, optional
        If given, must match the configured STFT rate (no resampling).

    Returns
    -------
    estimates : list of FrameEstimate
    report : MetricsReport or None
    """
    if sample_rate is not None and float(sample_rate) != float(config.stft.sample_rate):
        raise ValueError(
            f"recording rate {sample_rate} != configured {config.stft.sample_rate}")
    spec = stft_analyze(samples, config.stft)
    weights = correlation_weights(spec)
    T = config.gtvv.buffer_len
    if spec.n_frames < T:
        raise ValueError("recording too short for the velocity-vector buffer")

    source = SourceTrack(config.tracker)
    echo_tracks: list = []
    steer: Optional[Direction] = None
    fs = config.stft.sample_rate

    # frames whose omni energy sits far below the recording's peak carry no
    # fresh information (signal pauses); their stale buffers are skipped
    energy = np.sum(np.abs(spec.data[:, 0, :]) ** 2, axis=1)
    active = energy > energy.max() * 10.0 ** (-config.activity_gate_db / 10.0)

    for k in range(T - 1, spec.n_frames):
        if not active[k]:
            source.coast(k)
            reflections_update(echo_tracks, [], k, config.tracker, coast=True)
            continue
        if steer is None:
            try:
                steer = pseudo_intensity_direction(spec, k, T)
            except UndecodableError:
                source.coast(k)
                continue
        frame = estimate_gtvv(spec, k, steer, config.gtvv, weights=weights)
        try:
            doa = extract_doa(frame)
        except UndecodableError:
            source.coast(k)
            reflections_update(echo_tracks, [], k, config.tracker)
            continue
        source_update(source, doa)
        if config.gtvv.steer_update == "previous_doa":
            steer = source.direction_at(k) or doa.direction
        peaks = pick_reflection_peaks(frame, config.peaks, fs)
        obs, _skipped = peaks_to_observations(peaks, k)
        reflections_update(echo_tracks, obs, k, config.tracker)

    frames = source.frames
    # the estimate at frame k reflects the buffer-center geometry: the
    # velocity vector is fit over the trailing buffer, which lags the frame
    # timestamp by half a buffer for a moving source
    times = spec.times - (T - 1) / 2.0 * config.stft.hop / fs

    tau_sum = {}
    tau_count = {}
    pairs = confirmed_pairs(echo_tracks, source)
    pairs = {tid: rows for tid, rows in pairs.items()
             if len(rows) >= config.min_track_frames}
    lb, ub = config.toa_bounds
    if pairs and frames:
        for block in _blocks(frames, config.block_len, config.block_overlap):
            try:
                system = assemble(pairs, block, hypotheses=config.hypotheses,
                                  pair_policy=config.pair_policy,
                                  stride=config.pair_stride, lb=lb, ub=ub)
            except EmptySystemError:
                continue
            tau, _diag = solve_toa(system, config.solver)
            for k, t in zip(system.frame_ids, tau):
                tau_sum[k] = tau_sum.get(k, 0.0) + t
                tau_count[k] = tau_count.get(k, 0) + 1

    estimates = []
    c = config.speed_of_sound
    for k in frames:
        u = source.history[k]
        az = float(np.degrees(np.arctan2(u[1], u[0])))
        el = float(np.degrees(np.arcsin(np.clip(u[2], -1.0, 1.0))))
        if k in tau_sum:
            rng_m = c * tau_sum[k] / tau_count[k]
            range_valid = True
        else:
            rng_m = float("nan")
            range_valid = False
        estimates.append(FrameEstimate(
            frame_index=int(k), time=float(times[k]), azimuth_deg=az,
            elevation_deg=el, range_m=rng_m, doa_valid=True,
            range_valid=range_valid))

    report = compute_metrics(estimates, truth, config) if truth is not None else None
    return estimates, report


def _stats(errors):
    errors = np.asarray(errors, dtype=float)
    return {
        "median": float(np.median(errors)),
        "mean": float(np.mean(errors)),
        "std": float(np.std(errors)),
    }


def compute_metrics(estimates, truth: TruthTable, config: Optional[PipelineConfig] = None,
                    extra_estimates=None) -> MetricsReport:
    """Absolute per-frame errors against interpolated ground truth.

    Azimuth errors are wrapped to [0, 180] degrees; metrics pool all valid
    frames of all provided recordings directly.

    Parameters
    ----------
    estimates : list of FrameEstimate (or list of such lists via
        ``extra_estimates`` for pooling multiple recordings paired with
        matching truth tables).
    """
    groups = [(estimates, truth)]
    if extra_estimates:
        groups.extend(extra_estimates)
    az_err, el_err, rng_err = [], [], []
    for ests, tr in groups:
        valid = [e for e in ests if e.doa_valid]
        if not valid:
            continue
        t = np.array([e.time for e in valid])
        az_t, el_t, rng_t = tr.at(t)
        az_e = np.array([e.azimuth_deg for e in valid])
        el_e = np.array([e.elevation_deg for e in valid])
        d_az = np.abs(az_e - az_t) % 360.0
        d_az = np.minimum(d_az, 360.0 - d_az)
        az_err.extend(d_az.tolist())
        el_err.extend(np.abs(el_e - el_t).tolist())
        rvalid = [e for e in valid if e.range_valid]
        if rvalid:
            t_r = np.array([e.time for e in rvalid])
            _, _, rng_tr = tr.at(t_r)
            rng_err.extend(np.abs(np.array([e.range_m for e in rvalid]) - rng_tr).tolist())
    if not az_err:
        raise ValueError("no overlapping valid frames between estimates and truth")
    nan_stats = {"median": float("nan"), "mean": float("nan"), "std": float("nan")}
    return MetricsReport(
        azimuth=_stats(az_err),
        elevation=_stats(el_err),
        range=_stats(rng_err) if rng_err else nan_stats,
        n_frames_doa=len(az_err),
        n_frames_range=len(rng_err),
        config=config.to_dict() if config is not None else {},
    )


def emit(estimates, report, csv_path=None, json_path=None):
    """Write estimates as CSV and the metrics report as JSON.

    The CSV is byte-stable for identical inputs: fixed header
    ``k,t,az_deg,el_deg,range_m,range_valid`` and fixed float formatting.
    """
    if csv_path is not None:
        try:
            with open(csv_path, "w") as fh:
                fh.write("k,t,az_deg,el_deg,range_m,range_valid\n")
                for e in estimates:
                    fh.write(f"{e.frame_index},{e.time:.6f},{e.azimuth_deg:.6f},"
                             f"{e.elevation_deg:.6f},{e.range_m:.6f},"
                             f"{int(e.range_valid)}\n")
        except OSError as exc:
            raise IOError(f"cannot write estimates to {csv_path!r}: {exc}") from exc
    if json_path is not None and report is not None:
        try:
            with open(json_path, "w") as fh:
                json.dump(report.to_dict(), fh, indent=2)
                fh.write("\n")
        except OSError as exc:
            raise IOError(f"cannot write report to {json_path!r}: {exc}") from exc
