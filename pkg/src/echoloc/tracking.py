"""Temporal association of wavefront observations.

Two constant-velocity Kalman trackers: a single-target one for the source
DoA (unit vectors, renormalized after each update) and a multi-target one
for reflections.  Reflections are tracked as scaled vectors ``c * tau * u``
so that echoes sharing a DoA but differing in delay stay separable, and are
never interpolated across gaps: echo visibility genuinely toggles as the
source moves past finite reflectors, and fabricated frames would poison the
ranging constraints.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .sphharm import Direction
from .wavefront import EchoObservation

__all__ = [
    "TrackerConfig",
    "SourceTrack",
    "EchoTrack",
    "scaled_observation",
    "source_update",
    "reflections_update",
    "confirmed_pairs",
]


@dataclass(frozen=True)
class TrackerConfig:
    """Association and lifecycle parameters.

    ``gate_radius`` is in meters of scaled-vector space (the default is two
    delay samples at 16 kHz); ``process_noise`` / ``meas_noise`` are the
    white-acceleration intensity and measurement variance of the echo
    Kalman filters, ``source_*`` their unit-sphere counterparts.
    """

    process_noise: float = 4e-4
    meas_noise: float = 1e-4
    gate_radius: float = 0.043
    confirm_hits: int = 3
    delete_misses: int = 25
    max_tracks: int = 24
    source_process_noise: float = 1e-5
    source_meas_noise: float = 1e-3
    source_gate_sigma: float = 5.0
    speed_of_sound: float = 343.0

    def __post_init__(self):
        if self.confirm_hits < 1 or self.delete_misses < 1:
            raise ValueError("confirm_hits and delete_misses must be >= 1")


def scaled_observation(obs: EchoObservation, c: float = 343.0) -> np.ndarray:
    """Reflection observation as the R^3 point ``c * tau * u`` (meters)."""
    if obs.kind != "reflection":
        raise ValueError("scaled observations are defined for reflections only")
    return c * obs.tau * obs.direction.unit


class _KalmanCV3:
    """Constant-velocity Kalman filter in R^3 (dt = 1 frame)."""

    F = None
    H = None

    def __init__(self, z0, q, r, v0_var=1.0):
        if _KalmanCV3.F is None:
            F = np.eye(6)
            F[:3, 3:] = np.eye(3)
            _KalmanCV3.F = F
            _KalmanCV3.H = np.hstack([np.eye(3), np.zeros((3, 3))])
        self.q = q
        self.r = r
        self.x = np.concatenate([z0, np.zeros(3)])
        self.P = np.diag([r] * 3 + [v0_var] * 3)

    def predict(self):
        F = _KalmanCV3.F
        self.x = F @ self.x
        Q = self.q * np.block([
            [np.eye(3) / 4.0, np.eye(3) / 2.0],
            [np.eye(3) / 2.0, np.eye(3)],
        ])
        self.P = F @ self.P @ F.T + Q

    def innovation(self, z):
        H = _KalmanCV3.H
        nu = z - H @ self.x
        S = H @ self.P @ H.T + self.r * np.eye(3)
        return nu, S

    def update(self, z):
        H = _KalmanCV3.H
        nu, S = self.innovation(z)
        K = self.P @ H.T @ np.linalg.inv(S)
        self.x = self.x + K @ nu
        self.P = (np.eye(6) - K @ H) @ self.P

    @property
    def position(self):
        return self.x[:3].copy()


class SourceTrack:
    """Single-target DoA track on the unit sphere.

    ``history`` maps frame index to the smoothed unit vector; frames whose
    observation was missing or gated out carry ``interpolated = True``.
    """

    def __init__(self, config: TrackerConfig):
        self.config = config
        self.kf: Optional[_KalmanCV3] = None
        self.history = {}          # k -> unit vector
        self.interpolated = {}     # k -> bool
        self._reject_streak = 0

    def _record(self, k, interpolated):
        u = self.kf.position
        n = np.linalg.norm(u)
        if n > 0:
            u = u / n
            self.kf.x[:3] = u
        self.history[k] = u
        self.interpolated[k] = interpolated

    def coast(self, k: int):
        """Advance one frame without an observation."""
        if self.kf is None:
            return self
        self.kf.predict()
        self._record(k, True)
        return self

    def direction_at(self, k: int) -> Optional[Direction]:
        u = self.history.get(k)
        return None if u is None else Direction.from_unit_vector(u)

    @property
    def frames(self):
        return sorted(self.history)


def source_update(track: SourceTrack, obs: EchoObservation) -> SourceTrack:
    """Fold one direct-path observation into the source track.

    Outliers (innovation beyond the configured Mahalanobis gate) are skipped
    and the state coasts; a long reject streak forces re-acquisition so the
    track cannot lock onto a stale direction forever.
    """
    if obs.kind != "direct":
        raise ValueError("source track expects direct-path observations")
    cfg = track.config
    z = obs.direction.unit
    if track.kf is None:
        track.kf = _KalmanCV3(z, cfg.source_process_noise, cfg.source_meas_noise,
                              v0_var=1e-2)
        track._record(obs.frame_index, False)
        return track

    track.kf.predict()
    nu, S = track.kf.innovation(z)
    d2 = float(nu @ np.linalg.solve(S, nu))
    if d2 > cfg.source_gate_sigma ** 2 and track._reject_streak < 10:
        track._reject_streak += 1
        track._record(obs.frame_index, True)
        return track
    if track._reject_streak >= 10:
        # re-acquire: the world moved on without us
        track.kf = _KalmanCV3(z, cfg.source_process_noise, cfg.source_meas_noise,
                              v0_var=1e-2)
    else:
        track.kf.update(z)
    track._reject_streak = 0
    track._record(obs.frame_index, False)
    return track


@dataclass
class EchoTrack:
    """One reflection's lifecycle: scaled-vector Kalman state plus history."""

    track_id: int
    kf: _KalmanCV3
    history: List[tuple] = field(default_factory=list)  # (k, Direction, tau, g)
    hits: int = 1
    misses: int = 0
    confirmed: bool = False
    alive: bool = True
    last_frame: int = -1

    @property
    def state(self):
        if not self.alive:
            return "dead"
        return "confirmed" if self.confirmed else "tentative"

    @property
    def frames(self):
        return [h[0] for h in self.history]


def reflections_update(tracks: List[EchoTrack], observations: List[EchoObservation],
                       k: int, config: TrackerConfig, coast: bool = False) -> List[EchoTrack]:
    """One frame of gated global-nearest-neighbour multi-target tracking.

    All live tracks predict; observations are assigned by minimizing total
    scaled-space distance (Hungarian algorithm) subject to the gate; leftover
    observations spawn tentative tracks; tracks that miss
    ``delete_misses`` consecutive frames die and stay dead.

    With ``coast=True`` (signal pause: no information this frame) tracks
    only predict; no misses are counted and nothing is spawned, so echo
    tracks survive silence instead of fragmenting.
    """
    cfg = config
    c = cfg.speed_of_sound
    live = [t for t in tracks if t.alive]
    for t in live:
        t.kf.predict()
    if coast:
        return tracks

    obs = [o for o in observations if o.kind == "reflection"]
    points = [scaled_observation(o, c) for o in obs]

    assigned_tracks = set()
    assigned_obs = set()
    if live and points:
        big = 1e6
        cost = np.full((len(live), len(points)), big)
        for i, t in enumerate(live):
            p = t.kf.position
            for j, z in enumerate(points):
                d = float(np.linalg.norm(p - z))
                if d <= cfg.gate_radius:
                    cost[i, j] = d
        rows, cols = linear_sum_assignment(cost)
        for i, j in zip(rows, cols):
            if cost[i, j] >= big:
                continue
            t = live[i]
            t.kf.update(points[j])
            t.history.append((k, obs[j].direction, obs[j].tau, obs[j].strength))
            t.hits += 1
            t.misses = 0
            t.last_frame = k
            if t.hits >= cfg.confirm_hits:
                t.confirmed = True
            assigned_tracks.add(i)
            assigned_obs.add(j)

    for i, t in enumerate(live):
        if i not in assigned_tracks:
            t.misses += 1
            if t.misses >= cfg.delete_misses:
                t.alive = False

    next_id = max((t.track_id for t in tracks), default=-1) + 1
    n_live = sum(t.alive for t in tracks)
    for j, o in enumerate(obs):
        if j in assigned_obs or n_live >= cfg.max_tracks:
            continue
        kf = _KalmanCV3(points[j], cfg.process_noise, cfg.meas_noise, v0_var=1e-2)
        t = EchoTrack(track_id=next_id, kf=kf, last_frame=k)
        t.history.append((k, o.direction, o.tau, o.strength))
        if cfg.confirm_hits <= 1:
            t.confirmed = True
        tracks.append(t)
        next_id += 1
        n_live += 1
    return tracks


def confirmed_pairs(tracks: List[EchoTrack], source: SourceTrack):
    """Synchronized (source DoA, echo) tuples per confirmed track.

    For every track ever confirmed (dead ones keep their history), returns
    the frames where both the source DoA and that echo are available, as
    ``{track_id: [(k, u0, u_n, tau_n, g_n), ...]}`` sorted by frame.  Echo
    gaps are never interpolated.
    """
    out = {}
    for t in tracks:
        if not t.confirmed:
            continue
        rows = []
        for (k, u_n, tau_n, g_n) in t.history:
            u0 = source.history.get(k)
            if u0 is None:
                continue
            rows.append((k, Direction.from_unit_vector(u0), u_n, tau_n, g_n))
        rows.sort(key=lambda r: r[0])
        if rows:
            out[t.track_id] = rows
    return out
