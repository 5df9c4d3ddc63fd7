"""Glue from raw tracks to scenes."""
from __future__ import annotations

import logging
from typing import Sequence

from .geo import RawTrack, ReconstructionConfig, TrajectoryTooShort, Trajectory, preprocess_track
from .scene import Scene, assemble_scenes
from .synth import AirportSpec, generate

log = logging.getLogger(__name__)


def preprocess_tracks(
    tracks: Sequence[RawTrack],
    airport_ref: tuple[float, float],
    dt: float = 10.0,
    cutoff_nm: float = 70.0,
    cfg: ReconstructionConfig = ReconstructionConfig(),
) -> list[Trajectory]:
    out = []
    for tr in tracks:
        try:
            out.append(preprocess_track(tr, airport_ref, dt, cutoff_nm, cfg))
        except TrajectoryTooShort as exc:
            log.warning("dropping %s", exc)
    return out


def synthetic_scenes(
    spec: AirportSpec,
    days: int,
    seed: int,
    t_max: int = 60,
    dt: float = 10.0,
    cfg: ReconstructionConfig = ReconstructionConfig(),
) -> list[Scene]:
    tracks = [tr for day in generate(spec, days, seed) for tr in day.tracks]
    return assemble_scenes(preprocess_tracks(tracks, spec.ref_point, dt, 70.0, cfg), t_max, dt)
