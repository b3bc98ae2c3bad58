"""Image-source simulator: HOA renders + exact per-frame geometry records.

Supports shoebox rooms (classic mirror lattice, every image audible) and
free-field scenes with finite rectangular panels, where an image is audible
only while its virtual path to the microphone crosses every generating panel
inside the panel boundaries.  Geometry is frozen per render block, so the
emitted ground truth is analytically exact for the block it describes.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .gtvv import Wavefront, WavefrontSet
from .sphharm import Direction, sh_matrix

__all__ = [
    "Panel",
    "Trajectory",
    "Scene",
    "ImageSource",
    "EchoTruth",
    "FrameTruth",
    "image_sources",
    "visibility",
    "render_hoa",
    "ground_truth",
    "speech_shaped_noise",
]

_SHOEBOX_WALLS = ("x0", "x1", "y0", "y1", "z0", "z1")


@dataclass(frozen=True)
class Panel:
    """Finite rectangular reflector: corner plus two orthogonal edge vectors."""

    corner: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    absorption: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "corner", np.asarray(self.corner, dtype=float))
        object.__setattr__(self, "edge_u", np.asarray(self.edge_u, dtype=float))
        object.__setattr__(self, "edge_v", np.asarray(self.edge_v, dtype=float))
        if abs(np.dot(self.edge_u, self.edge_v)) > 1e-9 * (
                np.linalg.norm(self.edge_u) * np.linalg.norm(self.edge_v)):
            raise ValueError("panel edges must be orthogonal")
        if not 0.0 <= self.absorption < 1.0:
            raise ValueError("absorption must be in [0, 1)")

    @property
    def normal(self):
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)

    @property
    def reflection_coeff(self):
        return float(np.sqrt(1.0 - self.absorption))

    def mirror(self, point):
        """Mirror image of a point across the panel's plane."""
        n = self.normal
        return point - 2.0 * np.dot(point - self.corner, n) * n

    def contains_projection(self, point, tol=1e-9):
        """Whether an (in-plane) point lies inside the rectangle."""
        rel = point - self.corner
        for e in (self.edge_u, self.edge_v):
            t = np.dot(rel, e) / np.dot(e, e)
            if t < -tol or t > 1.0 + tol:
                return False
        return True


class Trajectory:
    """Piecewise-linear source trajectory (positions at given times)."""

    def __init__(self, times, positions):
        self.times = np.asarray(times, dtype=float)
        self.positions = np.asarray(positions, dtype=float)
        if self.times.ndim != 1 or self.positions.shape != (self.times.size, 3):
            raise ValueError("need times (n,) and positions (n, 3)")
        if self.times.size >= 2 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @classmethod
    def static(cls, position):
        return cls([0.0], [position])

    @classmethod
    def line(cls, start, end, t_start, t_end):
        return cls([t_start, t_end], [start, end])

    def position(self, t):
        """Position at time(s) t, clamped to the endpoint positions."""
        t = np.asarray(t, dtype=float)
        out = np.stack([
            np.interp(t, self.times, self.positions[:, i]) for i in range(3)
        ], axis=-1)
        return out


@dataclass
class Scene:
    """A shoebox room or a set of finite panels, a mic, and a moving source.

    Exactly one of ``room`` (shoebox extents, meters, walls at the coordinate
    planes) or ``panels`` must be given.  The microphone's z-axis is assumed
    vertical.  ``absorption`` applies to shoebox walls, either a scalar or a
    per-wall dict with keys x0, x1, y0, y1, z0, z1.
    """

    mic: np.ndarray
    trajectory: Trajectory
    room: Optional[Tuple[float, float, float]] = None
    panels: Optional[Sequence[Panel]] = None
    max_order: int = 1
    absorption: object = 0.0
    c: float = 343.0
    fs: float = 16000.0
    clearance: float = 0.1

    def __post_init__(self):
        self.mic = np.asarray(self.mic, dtype=float)
        if (self.room is None) == (self.panels is None):
            raise ValueError("specify exactly one of room or panels")
        if self.room is not None:
            dims = np.asarray(self.room, dtype=float)
            pts = np.vstack([self.trajectory.positions, self.mic[None, :]])
            if np.any(pts < self.clearance - 1e-12) or np.any(pts > dims - self.clearance + 1e-12):
                raise ValueError("mic/trajectory too close to a room surface")
        dmin = np.min(np.linalg.norm(self.trajectory.positions - self.mic, axis=1))
        if dmin < self.clearance:
            raise ValueError("trajectory passes too close to the microphone")

    def wall_absorption(self, wall):
        if isinstance(self.absorption, dict):
            return float(self.absorption.get(wall, 0.0))
        return float(self.absorption)


@dataclass(frozen=True)
class ImageSource:
    """One (possibly virtual) source: position, reflection history, gain.

    ``gain`` is the cumulative reflection coefficient product divided by the
    image-to-mic distance; order 0 is the true source.  For panel scenes,
    ``chain`` holds the generating panel indices in reflection order and
    ``chain_positions`` the intermediate image positions (source first).
    """

    position: np.ndarray
    order: int
    gain: float
    visible: bool
    chain: Tuple[int, ...] = ()
    chain_positions: Tuple = ()


def _shoebox_images(scene: Scene, src):
    dims = np.asarray(scene.room, dtype=float)
    mic = scene.mic
    n_max = scene.max_order
    images = []
    rng_r = range(-(n_max // 2 + 1), n_max // 2 + 2)
    for px in (0, 1):
        for py in (0, 1):
            for pz in (0, 1):
                for rx in rng_r:
                    for ry in rng_r:
                        for rz in rng_r:
                            p = np.array([px, py, pz])
                            r = np.array([rx, ry, rz])
                            hits_lo = np.abs(r - p)
                            hits_hi = np.abs(r)
                            order = int(np.sum(hits_lo) + np.sum(hits_hi))
                            if order > n_max:
                                continue
                            pos = (1 - 2 * p) * src + 2 * r * dims
                            beta = 1.0
                            for ax, name_lo, name_hi in ((0, "x0", "x1"), (1, "y0", "y1"), (2, "z0", "z1")):
                                beta *= np.sqrt(1.0 - scene.wall_absorption(name_lo)) ** hits_lo[ax]
                                beta *= np.sqrt(1.0 - scene.wall_absorption(name_hi)) ** hits_hi[ax]
                            dist = float(np.linalg.norm(pos - mic))
                            images.append(ImageSource(position=pos, order=order,
                                                      gain=beta / max(dist, 1e-9),
                                                      visible=True))
    images.sort(key=lambda im: np.linalg.norm(im.position - mic))
    return images


def _panel_images(scene: Scene, src):
    panels = list(scene.panels)
    mic = scene.mic
    images = [ImageSource(position=np.asarray(src, dtype=float), order=0,
                          gain=1.0 / max(float(np.linalg.norm(src - mic)), 1e-9),
                          visible=True, chain=(), chain_positions=(np.asarray(src, dtype=float),))]
    frontier = [(np.asarray(src, dtype=float), (), 1.0, (np.asarray(src, dtype=float),))]
    for _ in range(scene.max_order):
        new_frontier = []
        for pos, chain, beta, positions in frontier:
            for idx, panel in enumerate(panels):
                if chain and chain[-1] == idx:
                    continue
                mirrored = panel.mirror(pos)
                new_chain = chain + (idx,)
                new_beta = beta * panel.reflection_coeff
                new_positions = positions + (mirrored,)
                dist = float(np.linalg.norm(mirrored - mic))
                img = ImageSource(position=mirrored, order=len(new_chain),
                                  gain=new_beta / max(dist, 1e-9),
                                  visible=False, chain=new_chain,
                                  chain_positions=new_positions)
                object.__setattr__(img, "visible", visibility(img, mic, panels))
                images.append(img)
                new_frontier.append((mirrored, new_chain, new_beta, new_positions))
        frontier = new_frontier
    images.sort(key=lambda im: np.linalg.norm(im.position - mic))
    return images


def image_sources(scene: Scene, src_pos):
    """All image sources (order <= scene.max_order) for a source position.

    Returns the true source plus the mirror images sorted by distance to the
    mic; for panel scenes each image carries its audibility flag.
    """
    src = np.asarray(src_pos, dtype=float)
    if scene.room is not None:
        return _shoebox_images(scene, src)
    return _panel_images(scene, src)


def visibility(image: ImageSource, mic, panels) -> bool:
    """Whether a panel image's reflected path physically reaches the mic.

    Walks the virtual path backwards: the segment from the mic to the image
    must cross the last generating panel inside its rectangle; from that
    crossing point the segment towards the previous image must cross the
    previous panel, and so on down to the true source.
    """
    if not image.chain:
        return True
    mic = np.asarray(mic, dtype=float)
    point = mic
    # chain_positions[j] is the image after j reflections
    for j in range(len(image.chain), 0, -1):
        panel = panels[image.chain[j - 1]]
        target = image.chain_positions[j]
        n = panel.normal
        seg = target - point
        denom = np.dot(seg, n)
        if abs(denom) < 1e-12:
            return False
        t = np.dot(panel.corner - point, n) / denom
        if t < 0.0 or t > 1.0:
            return False
        crossing = point + t * seg
        if not panel.contains_projection(crossing):
            return False
        point = crossing
    return True


def _fractional_delay_taps(delay, n_taps, beta=8.0):
    d_int = int(np.floor(delay))
    frac = delay - d_int
    j = np.arange(-(n_taps // 2 - 1), n_taps // 2 + 1)
    x = j - frac
    arg = np.clip(1.0 - (x / (n_taps / 2.0)) ** 2, 0.0, None)
    w = np.sinc(x) * np.i0(beta * np.sqrt(arg)) / np.i0(beta)
    return d_int, j, w


def render_hoa(scene: Scene, signal, order: int, block_len: int = 512,
               snr_db: Optional[float] = None, rng=None, n_taps: int = 32):
    """Render the HOA recording of a source signal moving through a scene.

    Per block of ``block_len`` samples the image geometry is frozen at the
    block-center trajectory position; each audible image contributes its
    gain times the fractionally delayed source signal (windowed-sinc
    interpolation) encoded at its arrival direction.

    Parameters
    ----------
    signal : ndarray (n_samples,)
        Source waveform at scene.fs.
    order : int
        HOA order of the output.
    snr_db : float, optional
        Adds white Gaussian noise to every channel, scaled so the omni
        channel reaches this SNR.

    Returns
    -------
    ndarray (n_samples, (order+1)**2), ACN/N3D.
    """
    signal = np.asarray(signal, dtype=float)
    if signal.ndim != 1:
        raise ValueError("source signal must be single-channel")
    n = signal.size
    n_channels = (order + 1) ** 2
    out = np.zeros((n, n_channels))
    fs, c, mic = scene.fs, scene.c, scene.mic

    for start in range(0, n, block_len):
        stop = min(start + block_len, n)
        t_center = (start + (stop - start) / 2.0) / fs
        src = scene.trajectory.position(t_center)
        idx_block = np.arange(start, stop)
        for img in image_sources(scene, src):
            if not img.visible:
                continue
            rel = img.position - mic
            dist = np.linalg.norm(rel)
            delay = dist / c * fs
            d_int, j, taps = _fractional_delay_taps(delay, n_taps)
            idx = idx_block[None, :] - d_int - j[:, None]
            valid = (idx >= 0) & (idx < n)
            segment = np.where(valid, signal[np.clip(idx, 0, n - 1)], 0.0)
            delayed = taps @ segment
            u = rel / dist
            y = sh_matrix(np.arctan2(u[1], u[0]), np.arcsin(np.clip(u[2], -1, 1)), order)[0]
            out[start:stop] += img.gain * delayed[:, None] * y[None, :]

    if snr_db is not None:
        rng = np.random.default_rng(rng)
        p_sig = float(np.mean(out[:, 0] ** 2))
        sigma = np.sqrt(p_sig * 10.0 ** (-snr_db / 10.0))
        out = out + sigma * rng.standard_normal(out.shape)
    return out


@dataclass(frozen=True)
class EchoTruth:
    """Ground-truth parameters of one reflection at one frame."""

    direction: Direction
    toa: float
    tdoa: float
    rel_gain: float
    visible: bool
    chain: Tuple[int, ...]


@dataclass(frozen=True)
class FrameTruth:
    """Exact geometry of one analysis frame: source plus echo parameters."""

    time: float
    source_pos: np.ndarray
    direction: Direction
    toa: float
    echoes: Tuple[EchoTruth, ...] = field(default=())

    @property
    def range_m(self):
        return float(np.linalg.norm(self.source_pos))

    def wavefront_set(self, scene_c=343.0, visible_only=True):
        """The frame as a WavefrontSet (gains include 1/distance spreading)."""
        h0 = 1.0 / (self.toa * scene_c)
        fronts = [Wavefront(self.direction, self.toa, h0)]
        for e in self.echoes:
            if visible_only and not e.visible:
                continue
            fronts.append(Wavefront(e.direction, e.toa, e.rel_gain * h0))
        return WavefrontSet(fronts)


def ground_truth(scene: Scene, frame_times):
    """Exact per-frame source and echo parameters at the given timestamps.

    Returns
    -------
    list of FrameTruth
        One record per entry of ``frame_times``; echo gains are relative to
        the direct path, directions/ToAs are exact for the frozen geometry.
    """
    records = []
    mic = scene.mic
    for t in np.atleast_1d(np.asarray(frame_times, dtype=float)):
        src = scene.trajectory.position(t)
        images = image_sources(scene, src)
        direct = min((im for im in images if im.order == 0),
                     key=lambda im: np.linalg.norm(im.position - mic))
        rel0 = direct.position - mic
        dist0 = float(np.linalg.norm(rel0))
        toa0 = dist0 / scene.c
        echoes = []
        for im in images:
            if im.order == 0:
                continue
            rel = im.position - mic
            dist = float(np.linalg.norm(rel))
            echoes.append(EchoTruth(
                direction=Direction.from_unit_vector(rel),
                toa=dist / scene.c,
                tdoa=dist / scene.c - toa0,
                rel_gain=im.gain / direct.gain,
                visible=im.visible,
                chain=im.chain,
            ))
        echoes.sort(key=lambda e: e.toa)
        records.append(FrameTruth(
            time=float(t),
            source_pos=src - mic,
            direction=Direction.from_unit_vector(rel0),
            toa=toa0,
            echoes=tuple(echoes),
        ))
    return records


def speech_shaped_noise(n_samples, fs, rng=None, band=(100.0, 6000.0),
                        burst=0.4, pause=0.15):
    """Band-limited noise with on/off bursts (speech-like energy envelope).

    Bursts exercise the onset-emphasis of the correlation weights; the band
    limit keeps fractional-delay interpolation accurate in renders.
    """
    rng = np.random.default_rng(rng)
    x = rng.standard_normal(n_samples)
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / fs)
    shape = 1.0 / np.sqrt(1.0 + (freqs / 500.0) ** 2)  # gentle 1/f tilt
    shape[(freqs < band[0]) | (freqs > band[1])] = 0.0
    x = np.fft.irfft(spec * shape, n=n_samples)

    env = np.zeros(n_samples)
    t = 0
    ramp = int(0.02 * fs)
    while t < n_samples:
        b = int(burst * fs * rng.uniform(0.6, 1.4))
        p = int(pause * fs * rng.uniform(0.5, 1.5))
        stop = min(t + b, n_samples)
        env[t:stop] = rng.uniform(0.5, 1.0)
        if stop - t > 2 * ramp:
            env[t:t + ramp] *= np.linspace(0, 1, ramp)
            env[stop - ramp:stop] *= np.linspace(1, 0, ramp)
        t = stop + p
    x = x * env
    peak = np.max(np.abs(x))
    return x / peak if peak > 0 else x
