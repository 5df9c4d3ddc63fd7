"""Trajectory reconstruction, resampling/cutting and geodesic error metrics.

Raw surveillance tracks arrive at irregular rates. They are reconstructed on a
1 s grid by regularized least squares, resampled onto a common ``dt`` grid and
cut at the terminal-area boundary around the airport.

Ingestion assumes arrivals that were already filtered for go-arounds and
repeated holdings.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.linalg import solveh_banded

from .fileio import atomic_write

EARTH_RADIUS_NM = 3440.065
CSV_HEADER = ("flight_id", "timestamp", "lon", "lat", "alt")


class ReconstructionError(ValueError):
    """Raised when the smoothing system has no unique solution."""


class TrajectoryTooShort(ValueError):
    pass


@dataclass
class RawTrack:
    flight_id: str
    samples: np.ndarray  # (k, 4): timestamp [s], lon [deg], lat [deg], alt [ft]

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=float)
        s = self.samples
        if s.ndim != 2 or s.shape[1] != 4:
            raise ValueError(f"{self.flight_id}: samples must have shape (k, 4)")
        if len(s) < 2:
            raise ValueError(f"{self.flight_id}: need at least 2 samples")
        if np.any(np.diff(s[:, 0]) <= 0):
            raise ValueError(f"{self.flight_id}: timestamps must be strictly increasing")
        if np.any(np.abs(s[:, 1]) > 180) or np.any(np.abs(s[:, 2]) > 90):
            raise ValueError(f"{self.flight_id}: coordinates out of range")

    @property
    def timestamps(self) -> np.ndarray:
        return self.samples[:, 0]


@dataclass
class Trajectory:
    flight_id: str
    t0: float
    dt: float
    points: np.ndarray  # (k, 3): lon, lat, alt
    airport_ref: tuple[float, float]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.points))

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * (len(self.points) - 1)


@dataclass(frozen=True)
class ReconstructionConfig:
    lambda2: float = 1.0
    lambda3: float = 0.1

    def __post_init__(self) -> None:
        if self.lambda2 < 0 or self.lambda3 < 0:
            raise ValueError("smoothing weights must be non-negative")


@dataclass
class Reconstructed:
    """Dense 1 s positions from ``reconstruct``."""

    t_start: float
    positions: np.ndarray  # (t, 3)
    observed: np.ndarray = field(repr=False)  # (t,) bool


def difference_matrix(n: int, order: int) -> np.ndarray:
    """Dense forward-difference operator of shape (n - order, n)."""
    d = np.eye(n)
    for _ in range(order):
        d = d[1:] - d[:-1]
    return d


def _sym_band_upper(diag_obs: np.ndarray, lambda2: float, lambda3: float) -> np.ndarray:
    """Upper banded storage (4, n) of C'C + l2 D2'D2 + l3 D3'D3."""
    n = len(diag_obs)
    ab = np.zeros((4, n))
    ab[3] = diag_obs
    # D_k'D_k is a sum of outer products of the stencil placed at each row.
    for lam, stencil in ((lambda2, np.array([1.0, -2.0, 1.0])), (lambda3, np.array([-1.0, 3.0, -3.0, 1.0]))):
        if lam == 0.0:
            continue
        k = len(stencil)
        rows = n - k + 1
        if rows <= 0:
            continue
        for a in range(k):
            for b in range(a, k):
                off = b - a
                col = np.arange(rows) + b
                ab[3 - off, col] += lam * stencil[a] * stencil[b]
    return ab


def reconstruct(track: RawTrack, cfg: ReconstructionConfig = ReconstructionConfig()) -> Reconstructed:
    """Smooth a raw track onto a 1 s grid spanning its first to last timestamp.

    Minimizes ``|CP - P~|^2 + l2 |D2 P|^2 + l3 |D3 P|^2`` column by column; the
    normal matrix is symmetric with bandwidth 3 and is factored once.
    """
    ts = np.round(track.timestamps).astype(np.int64)
    if np.any(np.diff(ts) <= 0):
        raise ValueError(f"{track.flight_id}: timestamps collide on the 1 s grid")
    t_start = int(ts[0])
    n = int(ts[-1] - ts[0]) + 1
    idx = ts - t_start
    observed = np.zeros(n, dtype=bool)
    observed[idx] = True
    target = np.zeros((n, 3))
    target[idx] = track.samples[:, 1:]

    ab = _sym_band_upper(observed.astype(float), cfg.lambda2, cfg.lambda3)
    if cfg.lambda2 == 0.0 and cfg.lambda3 == 0.0 and not observed.all():
        raise ReconstructionError(f"{track.flight_id}: underdetermined reconstruction (unobserved grid times, no smoothing)")
    try:
        positions = solveh_banded(ab, target, lower=False, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise ReconstructionError(f"{track.flight_id}: underdetermined reconstruction") from exc
    return Reconstructed(t_start=float(t_start), positions=positions, observed=observed)


def reconstruct_dense(track: RawTrack, cfg: ReconstructionConfig) -> np.ndarray:
    """Same objective solved with explicit dense matrices; used as a reference."""
    ts = np.round(track.timestamps).astype(np.int64)
    n = int(ts[-1] - ts[0]) + 1
    idx = ts - ts[0]
    c = np.zeros((n, n))
    c[idx, idx] = 1.0
    target = np.zeros((n, 3))
    target[idx] = track.samples[:, 1:]
    d2 = difference_matrix(n, 2)
    d3 = difference_matrix(n, 3)
    a = c.T @ c + cfg.lambda2 * d2.T @ d2 + cfg.lambda3 * d3.T @ d3
    return np.linalg.solve(a, c.T @ target)


def horizontal_error(a, b) -> np.ndarray | float:
    """Great-circle distance in nautical miles between (lon, lat) points."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lon1, lat1 = np.radians(a[..., 0]), np.radians(a[..., 1])
    lon2, lat2 = np.radians(b[..., 0]), np.radians(b[..., 1])
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    d = 2 * EARTH_RADIUS_NM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    return float(d) if d.ndim == 0 else d


def vertical_error(a_alt, b_alt):
    return np.abs(np.asarray(a_alt, dtype=float) - np.asarray(b_alt, dtype=float))


def destination(ref: tuple[float, float], bearing_deg: float, range_nm: float) -> tuple[float, float]:
    """(lon, lat) reached from ``ref`` along a great circle."""
    lon1, lat1 = np.radians(ref[0]), np.radians(ref[1])
    brg = np.radians(bearing_deg)
    ang = range_nm / EARTH_RADIUS_NM
    lat2 = np.arcsin(np.sin(lat1) * np.cos(ang) + np.cos(lat1) * np.sin(ang) * np.cos(brg))
    lon2 = lon1 + np.arctan2(np.sin(brg) * np.sin(ang) * np.cos(lat1), np.cos(ang) - np.sin(lat1) * np.sin(lat2))
    return float(np.degrees(lon2)), float(np.degrees(lat2))


def resample_and_cut(
    rec: Reconstructed,
    dt: float,
    airport_ref: tuple[float, float],
    cutoff_nm: float = 70.0,
    flight_id: str = "",
) -> Trajectory:
    """Sample 1 s positions on the absolute ``dt`` grid and keep the final inbound segment.

    Grid points are the absolute times that are multiples of ``dt``, so every
    trajectory of a dataset shares one time grid. Points up to and including
    the last one outside ``cutoff_nm`` are dropped; the boundary is closed.
    """
    step = int(round(dt))
    if step < 1 or abs(step - dt) > 1e-9:
        raise ValueError("dt must be a positive whole number of seconds")
    t_start = int(rec.t_start)
    offset = (-t_start) % step
    pts = rec.positions[offset::step]
    dist = horizontal_error(pts[:, :2], np.asarray(airport_ref, dtype=float))
    outside = np.flatnonzero(np.atleast_1d(dist) > cutoff_nm)
    first = outside[-1] + 1 if len(outside) else 0
    pts = pts[first:]
    if len(pts) < 2:
        raise TrajectoryTooShort(f"{flight_id or 'trajectory'}: trajectory too short after cut")
    t0 = float(t_start + offset + first * step)
    return Trajectory(flight_id=flight_id, t0=t0, dt=float(step), points=pts.copy(), airport_ref=tuple(airport_ref))


def preprocess_track(
    track: RawTrack,
    airport_ref: tuple[float, float],
    dt: float = 10.0,
    cutoff_nm: float = 70.0,
    cfg: ReconstructionConfig = ReconstructionConfig(),
) -> Trajectory:
    return resample_and_cut(reconstruct(track, cfg), dt, airport_ref, cutoff_nm, flight_id=track.flight_id)


def read_tracks_csv(path: str | Path) -> list[RawTrack]:
    """Read the ``flight_id,timestamp,lon,lat,alt`` schema into raw tracks."""
    rows: dict[str, list[tuple[float, float, float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                fid = row[0]
                rows.setdefault(fid, []).append((int(row[1]), float(row[2]), float(row[3]), float(row[4])))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from exc
    tracks = [RawTrack(fid, np.array(sorted(s))) for fid, s in rows.items()]
    tracks.sort(key=lambda t: (t.samples[0, 0], t.flight_id))
    return tracks


def write_tracks_csv(path: str | Path, tracks: Iterable[RawTrack | Trajectory]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for tr in tracks:
        if isinstance(tr, Trajectory):
            data = np.column_stack([tr.times, tr.points])
        else:
            data = tr.samples
        for ts, lon, lat, alt in data:
            w.writerow([tr.flight_id, int(round(ts)), f"{lon:.6f}", f"{lat:.6f}", f"{alt:.1f}"])
    atomic_write(path, buf.getvalue().encode())
