"""Recording and ground-truth file I/O.

A recording is a multichannel float WAV in ACN channel order plus an
optional JSON-lines sidecar: a meta line (sample rate, normalization, mic
position) followed by one record per analysis frame with the exact source
position and per-image echo parameters.  SN3D input is converted to the
internal N3D normalization at ingestion.  A LOCATA-style task directory
(HOA wav + 120 Hz source/array position tables) is supported through the
same interface.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .sphharm import order_from_channels

__all__ = [
    "TruthTable",
    "read_hoa_wav",
    "write_hoa_wav",
    "write_sidecar",
    "read_sidecar",
    "sn3d_to_n3d",
    "load_recording",
]


def sn3d_to_n3d(samples):
    """Rescale ACN-ordered channels from SN3D to N3D normalization."""
    samples = np.asarray(samples, dtype=float)
    order = order_from_channels(samples.shape[1])
    scale = np.concatenate([
        np.full(2 * l + 1, np.sqrt(2 * l + 1.0)) for l in range(order + 1)
    ])
    return samples * scale[None, :]


def write_hoa_wav(path, samples, sample_rate):
    """Write float32 multichannel WAV (ACN/N3D)."""
    wavfile.write(path, int(sample_rate), np.asarray(samples, dtype=np.float32))


def read_hoa_wav(path):
    """Read a multichannel WAV; integer formats are scaled to [-1, 1].

    Returns
    -------
    samples : ndarray (n_samples, n_channels), float
    sample_rate : int
    """
    try:
        sample_rate, data = wavfile.read(path)
    except Exception as exc:
        raise IOError(f"cannot read recording {path!r}: {exc}") from exc
    if data.ndim == 1:
        data = data[:, None]
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(float) / float(np.iinfo(data.dtype).max)
    else:
        data = data.astype(float)
    if data.size == 0:
        raise IOError(f"recording {path!r} is empty")
    return data, int(sample_rate)


@dataclass
class TruthTable:
    """Ground truth as source positions (relative to the mic) over time."""

    times: np.ndarray          # (n,)
    positions: np.ndarray      # (n, 3) meters, mic at origin

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        if self.times.ndim != 1 or self.positions.shape != (self.times.size, 3):
            raise ValueError("truth table needs times (n,) and positions (n, 3)")

    def at(self, t):
        """Azimuth/elevation (degrees) and range (m), linearly interpolated.

        Positions are interpolated componentwise, then converted to angles,
        which stays well behaved through the azimuth wrap.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        p = np.stack([np.interp(t, self.times, self.positions[:, i]) for i in range(3)],
                     axis=-1)
        rng = np.linalg.norm(p, axis=-1)
        az = np.degrees(np.arctan2(p[:, 1], p[:, 0]))
        el = np.degrees(np.arcsin(np.clip(p[:, 2] / np.maximum(rng, 1e-12), -1, 1)))
        return az, el, rng


def write_sidecar(path, meta, records):
    """Write ground truth as JSON lines: one meta line, one line per frame.

    Parameters
    ----------
    meta : dict
        Recording metadata (sample rate, normalization, mic position, ...).
    records : sequence of FrameTruth
    """
    with open(path, "w") as fh:
        fh.write(json.dumps({"type": "meta", **meta}) + "\n")
        for rec in records:
            row = {
                "type": "frame",
                "t": rec.time,
                "source_xyz": [float(v) for v in rec.source_pos],
                "azimuth_deg": float(np.degrees(rec.direction.azimuth)),
                "elevation_deg": float(np.degrees(rec.direction.elevation)),
                "range_m": rec.range_m,
                "toa_s": rec.toa,
                "echoes": [
                    {
                        "azimuth_deg": float(np.degrees(e.direction.azimuth)),
                        "elevation_deg": float(np.degrees(e.direction.elevation)),
                        "tdoa_s": e.tdoa,
                        "rel_gain": e.rel_gain,
                        "visible": bool(e.visible),
                    }
                    for e in rec.echoes
                ],
            }
            fh.write(json.dumps(row) + "\n")


def read_sidecar(path):
    """Read a sidecar; returns (meta dict, frame record dicts)."""
    meta = {}
    frames = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if row.get("type") == "meta":
                meta = row
            else:
                frames.append(row)
    if not frames:
        raise IOError(f"sidecar {path!r} holds no frame records")
    return meta, frames


def _truth_from_sidecar(frames):
    times = np.array([f["t"] for f in frames])
    pos = np.array([f["source_xyz"] for f in frames])
    return TruthTable(times, pos)


def _load_position_table(path):
    # whitespace/comma separated columns: time x y z (120 Hz in LOCATA tasks)
    raw = np.genfromtxt(path, delimiter=None, comments="#")
    if raw.ndim == 1:
        raw = raw[None, :]
    if raw.shape[1] < 4:
        raise IOError(f"position table {path!r} needs columns: time x y z")
    return raw[:, 0], raw[:, 1:4]


def load_recording(path, fmt="auto"):
    """Load a recording (and ground truth when present) from disk.

    Formats
    -------
    ``wav+sidecar``
        ``path`` is a WAV file; ``<stem>.truth.jsonl`` next to it (or a
        directory with ``hoa.wav`` / ``truth.jsonl``).  The sidecar meta may
        declare ``normalization: "SN3D"``; channels are converted to N3D.
    ``locata-task-dir``
        Directory with an HOA WAV plus ``position_source.txt`` and
        ``position_array.txt`` tables (time x y z, e.g. at 120 Hz); truth
        positions are taken relative to the array.
    ``auto``
        Picks by path shape and directory contents.

    Returns
    -------
    samples : ndarray (n_samples, (L+1)**2), N3D
    sample_rate : int
    truth : TruthTable or None
    """
    if fmt == "auto":
        if os.path.isdir(path):
            fmt = ("locata-task-dir"
                   if os.path.exists(os.path.join(path, "position_source.txt"))
                   else "wav+sidecar")
        else:
            fmt = "wav+sidecar"

    if fmt == "wav+sidecar":
        if os.path.isdir(path):
            wav_path = os.path.join(path, "hoa.wav")
            sidecar = os.path.join(path, "truth.jsonl")
        else:
            wav_path = path
            stem, _ = os.path.splitext(path)
            sidecar = stem + ".truth.jsonl"
        if not os.path.exists(wav_path):
            raise IOError(f"no recording at {wav_path!r}")
        samples, sr = read_hoa_wav(wav_path)
        truth = None
        if os.path.exists(sidecar):
            meta, frames = read_sidecar(sidecar)
            if meta.get("sample_rate") and int(meta["sample_rate"]) != sr:
                raise IOError(f"sidecar sample rate {meta['sample_rate']} != wav {sr}")
            if str(meta.get("normalization", "N3D")).upper() == "SN3D":
                samples = sn3d_to_n3d(samples)
            truth = _truth_from_sidecar(frames)
        return samples, sr, truth

    if fmt == "locata-task-dir":
        wavs = sorted(f for f in os.listdir(path) if f.endswith(".wav"))
        if not wavs:
            raise IOError(f"no WAV file in {path!r}")
        samples, sr = read_hoa_wav(os.path.join(path, wavs[0]))
        meta_path = os.path.join(path, "meta.json")
        if os.path.exists(meta_path):
            with open(meta_path) as fh:
                meta = json.load(fh)
            if str(meta.get("normalization", "N3D")).upper() == "SN3D":
                samples = sn3d_to_n3d(samples)
        src_t, src_p = _load_position_table(os.path.join(path, "position_source.txt"))
        arr_path = os.path.join(path, "position_array.txt")
        if os.path.exists(arr_path):
            arr_t, arr_p = _load_position_table(arr_path)
            arr_interp = np.stack([np.interp(src_t, arr_t, arr_p[:, i]) for i in range(3)],
                                  axis=-1)
            rel = src_p - arr_interp
        else:
            rel = src_p
        return samples, sr, TruthTable(src_t, rel)

    raise ValueError(f"unknown recording format {fmt!r}")
