"""Echo-aided 3D localization of a moving sound source from HOA recordings.

The package estimates, per analysis frame, the azimuth, elevation and range
of a single moving source: early reflections are pulled out of the
generalized time-domain velocity vector of the recording, associated over
time, and fed to a geometric constraint solver for the absolute
time-of-arrival.  An image-source simulator provides ground truth.
"""

__version__ = "0.1.0"

from .sphharm import (
    BeamformerWeights,
    Direction,
    UndecodableError,
    beam_response,
    decode_direction,
    max_directivity_beamformer,
    sh_eval,
    sh_matrix,
)

__all__ = [
    "BeamformerWeights",
    "Direction",
    "UndecodableError",
    "beam_response",
    "decode_direction",
    "max_directivity_beamformer",
    "sh_eval",
    "sh_matrix",
]
