"""Multi-agent scenes: windowing, masks, positional encoding, normalization, batching.

Scene data is front-aligned per agent: ``data[n, :valid_len[n]]`` holds the
agent's samples and everything after is zero. ``start_step[n]`` records the
scene-relative step of the first sample, which is the index used for the
positional encoding.

Flattened attention slots are ordered time-major, ``slot = t * N + n``, so each
time step occupies one N x N block of the agent mask.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .fileio import atomic_write
from .geo import Trajectory

FEATURES = ("lon", "lat", "alt")


@dataclass
class Scene:
    window_start: float
    dt: float
    data: np.ndarray  # (N, T, F)
    valid_len: np.ndarray  # (N,) int
    agent_ids: list[str]
    start_step: np.ndarray | None = None  # (N,) int
    eta_s: np.ndarray | None = None  # (N,) seconds to terminus; NaN if landed inside the window
    airport_ref: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=float)
        self.valid_len = np.asarray(self.valid_len, dtype=np.int64)
        n, t, _ = self.data.shape
        if n < 1:
            raise ValueError("scene needs at least one agent")
        if self.start_step is None:
            self.start_step = np.zeros(n, dtype=np.int64)
        self.start_step = np.asarray(self.start_step, dtype=np.int64)
        if self.eta_s is None:
            self.eta_s = np.full(n, np.nan)
        self.eta_s = np.asarray(self.eta_s, dtype=float)
        if len(self.valid_len) != n or len(self.agent_ids) != n:
            raise ValueError("per-agent arrays must have length N")
        if np.any(self.valid_len < 1) or np.any(self.valid_len > t):
            raise ValueError("valid_len must lie in [1, T]")
        pad = ~self.valid_mask()
        if np.any(self.data[pad] != 0.0):
            raise ValueError("padded entries must be zero")

    @property
    def N(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]

    @property
    def F(self) -> int:
        return self.data.shape[2]

    def valid_mask(self) -> np.ndarray:
        return np.arange(self.T)[None, :] < self.valid_len[:, None]

    def airborne(self) -> np.ndarray:
        """Agents still airborne at the end of the window (they carry an ETA label)."""
        return ~np.isnan(self.eta_s)


@dataclass
class SceneMask:
    agent_mask: np.ndarray  # (NT, NT) {0,1}
    pad_mask: np.ndarray  # (NT,) {0,1}, 1 = padded


def slot_agent(n_agents: int, n_steps: int) -> np.ndarray:
    return np.tile(np.arange(n_agents), n_steps)


def slot_step(n_agents: int, n_steps: int) -> np.ndarray:
    return np.repeat(np.arange(n_steps), n_agents)


def agent_mask(n_agents: int, n_steps: int) -> np.ndarray:
    a = slot_agent(n_agents, n_steps)
    return (a[:, None] == a[None, :]).astype(np.int8)


def build_masks(scene: Scene) -> SceneMask:
    valid = scene.valid_mask()  # (N, T)
    pad = (~valid).T.reshape(-1).astype(np.int8)
    return SceneMask(agent_mask=agent_mask(scene.N, scene.T), pad_mask=pad)


def positional_encoding(t_max: int, d: int) -> np.ndarray:
    """Sinusoidal table of shape (t_max, d); even columns sin, odd columns cos."""
    if d % 2:
        raise ValueError("model dimension must be even")
    t = np.arange(t_max, dtype=float)[:, None]
    i = np.arange(d)
    expo = np.where(i % 2 == 0, i, i - 1) / d
    ang = t / np.power(10000.0, expo)[None, :]
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


@dataclass(frozen=True)
class Normalizer:
    """Per-feature standardization fitted on a training split.

    Longitude and latitude are standardized relative to the airport the
    statistics came from: a scene from another airport is shifted by the
    difference of reference points before scaling, so one normalizer serves
    several airports.
    """

    mean: tuple[float, ...]
    std: tuple[float, ...]
    ref: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        std = np.asarray(self.std, dtype=float)
        if np.any(~np.isfinite(std)) or np.any(std <= 0):
            raise ValueError("normalizer std must be positive (constant feature?)")

    @classmethod
    def fit(cls, scenes: Sequence[Scene]) -> "Normalizer":
        if not scenes:
            raise ValueError("cannot fit a normalizer on zero scenes")
        ref = scenes[0].airport_ref
        rows = []
        for sc in scenes:
            x = sc.data[sc.valid_mask()]
            rows.append(x - _ref_shift(sc.airport_ref, ref, sc.F))
        x = np.concatenate(rows)
        return cls(tuple(map(float, x.mean(axis=0))), tuple(map(float, x.std(axis=0))), tuple(map(float, ref)))

    def _center(self, scene: Scene) -> tuple[np.ndarray, np.ndarray]:
        mean = np.asarray(self.mean) + _ref_shift(scene.airport_ref, self.ref, len(self.mean))
        return mean, np.asarray(self.std)

    def normalize(self, scene: Scene) -> Scene:
        mean, std = self._center(scene)
        valid = scene.valid_mask()[..., None]
        return replace(scene, data=np.where(valid, (scene.data - mean) / std, 0.0))

    def denormalize(self, scene: Scene) -> Scene:
        return replace(scene, data=self.denormalize_array(scene.data, scene, scene.valid_mask()))

    def denormalize_array(self, x: np.ndarray, scene: Scene, valid: np.ndarray | None = None) -> np.ndarray:
        mean, std = self._center(scene)
        out = x * std + mean
        if valid is not None:
            out = np.where(valid[..., None], out, 0.0)
        return out


def _ref_shift(ref: tuple[float, float], base: tuple[float, float], n_features: int) -> np.ndarray:
    shift = np.zeros(n_features)
    shift[:2] = np.asarray(ref, dtype=float) - np.asarray(base, dtype=float)
    return shift


def assemble_scenes(trajectories: Sequence[Trajectory], t_max: int = 60, dt: float = 10.0) -> list[Scene]:
    """Carve trajectories into consecutive non-overlapping windows of ``t_max`` steps.

    Windows are anchored at the earliest sample of the dataset. A flight that
    spans several windows appears in each with its segment; windows with no
    samples are skipped.
    """
    if not trajectories:
        return []
    for tr in trajectories:
        if abs(tr.dt - dt) > 1e-9:
            raise ValueError(f"{tr.flight_id}: dt {tr.dt} differs from {dt}")
    origin = min(tr.t0 for tr in trajectories)
    span = t_max * dt
    windows: dict[int, list[tuple[int, Trajectory, int, int]]] = {}
    for tr in trajectories:
        steps = np.rint((tr.times - origin) / dt).astype(np.int64)
        win = steps // t_max
        for w in np.unique(win):
            sel = np.flatnonzero(win == w)
            first_step = int(steps[sel[0]] - w * t_max)
            windows.setdefault(int(w), []).append((first_step, tr, int(sel[0]), len(sel)))

    scenes = []
    for w in sorted(windows):
        members = sorted(windows[w], key=lambda m: (m[0], m[1].flight_id))
        n = len(members)
        t = max(fs + ln for fs, _, _, ln in members)
        data = np.zeros((n, t, 3))
        valid_len = np.zeros(n, dtype=np.int64)
        start = np.zeros(n, dtype=np.int64)
        eta = np.full(n, np.nan)
        window_start = origin + w * span
        last_step_time = window_start + (t_max - 1) * dt
        for k, (fs, tr, i0, ln) in enumerate(members):
            data[k, :ln] = tr.points[i0 : i0 + ln]
            valid_len[k] = ln
            start[k] = fs
            last_time = tr.times[i0 + ln - 1]
            if tr.t_end >= last_step_time - 1e-9:
                eta[k] = tr.t_end - last_time
        ref = members[0][1].airport_ref
        scenes.append(
            Scene(
                window_start=float(window_start),
                dt=float(dt),
                data=data,
                valid_len=valid_len,
                agent_ids=[m[1].flight_id for m in members],
                start_step=start,
                eta_s=eta,
                airport_ref=tuple(ref),
            )
        )
    return scenes


@dataclass
class Batch:
    """Scenes padded to a common agent count and length."""

    x: np.ndarray  # (B, N, T, F)
    valid: np.ndarray  # (B, N, T) bool
    start_step: np.ndarray  # (B, N) int
    present: np.ndarray  # (B, N) bool, False for agents added as padding
    eta_s: np.ndarray  # (B, N), NaN where no label
    scenes: list[Scene] = field(repr=False)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.x.shape

    def key_keep(self) -> np.ndarray:
        """(B, L) True for non-padded slots, time-major flattening."""
        return self.valid.transpose(0, 2, 1).reshape(self.x.shape[0], -1)

    def agent_mask(self) -> np.ndarray:
        _, n, t, _ = self.x.shape
        return agent_mask(n, t)


def batch(scenes: Sequence[Scene]) -> Batch:
    if not scenes:
        raise ValueError("cannot batch zero scenes")
    b = len(scenes)
    n = max(s.N for s in scenes)
    t = max(s.T for s in scenes)
    f = scenes[0].F
    x = np.zeros((b, n, t, f))
    valid = np.zeros((b, n, t), dtype=bool)
    start = np.zeros((b, n), dtype=np.int64)
    present = np.zeros((b, n), dtype=bool)
    eta = np.full((b, n), np.nan)
    for i, s in enumerate(scenes):
        x[i, : s.N, : s.T] = s.data
        valid[i, : s.N, : s.T] = s.valid_mask()
        start[i, : s.N] = s.start_step
        present[i, : s.N] = True
        eta[i, : s.N] = s.eta_s
    return Batch(x=x, valid=valid, start_step=start, present=present, eta_s=eta, scenes=list(scenes))


# Scene container: little-endian, one file holds many scenes.
#   b"MASC" | u32 version | u32 count
#   per scene: u32 N, u32 T, u32 F, f64 dt, f64 window_start, f64 ref_lon, f64 ref_lat,
#              u32[N] valid_len, u32[N] start_step, f32[N] eta_s,
#              f32[N*T*F] data (agent, time, feature), then N x (u16 len + utf-8 id)
_MAGIC = b"MASC"
_VERSION = 1


def write_scenes(path: str | Path, scenes: Sequence[Scene]) -> None:
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(scenes))]
    for s in scenes:
        parts.append(struct.pack("<IIIdddd", s.N, s.T, s.F, s.dt, s.window_start, *s.airport_ref))
        parts.append(s.valid_len.astype("<u4").tobytes())
        parts.append(s.start_step.astype("<u4").tobytes())
        parts.append(s.eta_s.astype("<f4").tobytes())
        parts.append(np.ascontiguousarray(s.data, dtype="<f4").tobytes())
        for aid in s.agent_ids:
            raw = aid.encode()
            parts.append(struct.pack("<H", len(raw)) + raw)
    atomic_write(Path(path), b"".join(parts))


def read_scenes(path: str | Path) -> list[Scene]:
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not a scene container")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported scene container version {version}")
    off = 12
    scenes = []
    head = struct.Struct("<IIIdddd")
    try:
        for _ in range(count):
            n, t, f, dt, ws, rlon, rlat = head.unpack_from(buf, off)
            off += head.size

            def take(dtype: str, k: int) -> np.ndarray:
                nonlocal off
                arr = np.frombuffer(buf, dtype=dtype, count=k, offset=off)
                off += arr.nbytes
                return arr

            valid_len = take("<u4", n).astype(np.int64)
            start = take("<u4", n).astype(np.int64)
            eta = take("<f4", n).astype(float)
            data = take("<f4", n * t * f).astype(float).reshape(n, t, f)
            ids = []
            for _ in range(n):
                (ln,) = struct.unpack_from("<H", buf, off)
                off += 2
                ids.append(buf[off : off + ln].decode())
                off += ln
            scenes.append(Scene(ws, dt, data, valid_len, ids, start, eta, (rlon, rlat)))
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt scene container") from exc
    return scenes
