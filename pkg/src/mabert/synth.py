"""Seeded synthetic terminal-airspace arrival traffic.

Flights enter at fixed entry points ~76 nm out, follow a route template to a
base point and then join a final approach that ends 5 nm from the airport.
Three kinds of structure make the traffic worth modelling as a multi-agent
system:

* an hourly operations state shared by every flight airborne in that hour
  (final-approach speed, intercept range and parallel-runway offset), which
  other aircraft in a scene reveal before the ego flight flies it;
* in-trail spacing at each entry fix: an entry is delayed until
  ``separation_s`` has elapsed since the previous flight at that fix;
* in-trail spacing to the runway: inside ``merge_range_nm`` a flight slows
  down as needed to stay ``runway_spacing_s`` behind the previous arrival at
  every distance to go, so its final minutes depend on the aircraft ahead;
* per-flight Gaussian lateral, vertical and speed noise.

Tracks are emitted at jittered 4-12 s sampling with small measurement noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from .geo import RawTrack, horizontal_error

EPOCH_2019 = int(datetime(2019, 1, 1, tzinfo=timezone.utc).timestamp())


@dataclass(frozen=True)
class AirportSpec:
    name: str
    ref_point: tuple[float, float]
    runway_heading: float
    entry_fixes: tuple[tuple[float, float], ...]  # (bearing deg, range nm) from ref_point
    route_templates: tuple[tuple[tuple[float, float], ...], ...] = ()  # per fix, polar waypoints up to the base turn
    nominal_speed: tuple[tuple[float, float], ...] = ((0, 160), (12, 190), (30, 240), (60, 270), (120, 290))
    descent_profile: tuple[tuple[float, float], ...] = ((0, 1800), (12, 3500), (30, 8000), (60, 13000), (120, 16000))
    arrival_rate: float = 16.0  # flights per hour
    separation_s: float = 90.0
    runway_spacing_s: float = 90.0
    merge_range_nm: float = 30.0
    max_slowdown: float = 0.5  # delay absorbed per second flown (0.5 = down to 2/3 speed)
    operating_hours: tuple[int, int] = (6, 23)
    lateral_sigma_nm: float = 0.8
    vertical_sigma_ft: float = 300.0
    speed_sigma: float = 0.05
    final_speed_range: tuple[float, float] = (145.0, 195.0)
    intercept_range_nm: tuple[float, float] = (9.0, 15.0)
    runway_offset_nm: float = 0.6
    sample_gap_s: tuple[int, int] = (4, 12)
    measurement_sigma_deg: float = 2e-4
    measurement_sigma_ft: float = 20.0

    def __post_init__(self) -> None:
        if self.arrival_rate <= 0:
            raise ValueError("arrival_rate must be positive")
        if any(r > 78.0 for _, r in self.entry_fixes):
            raise ValueError("entry fixes must lie within 78 nm of the airport")
        if self.route_templates and len(self.route_templates) != len(self.entry_fixes):
            raise ValueError("one route template per entry fix")
        lo, hi = self.operating_hours
        if not 0 <= lo < hi <= 24:
            raise ValueError("operating_hours must satisfy 0 <= start < end <= 24")

    def templates(self) -> tuple[tuple[tuple[float, float], ...], ...]:
        if self.route_templates:
            return self.route_templates
        return tuple(default_template(fix, self.runway_heading) for fix in self.entry_fixes)


@dataclass
class TrafficDay:
    date: str
    tracks: list[RawTrack] = field(default_factory=list)
    entries: list[tuple[int, float]] = field(default_factory=list)  # (fix index, entry time)


def default_template(fix: tuple[float, float], runway_heading: float) -> tuple[tuple[float, float], ...]:
    """Entry fix, a 45 nm intermediate on the same radial, and a base-turn point."""
    bearing, rng = fix
    approach = (runway_heading + 180.0) % 360.0
    side = np.sign(np.sin(np.radians(bearing - approach))) or 1.0
    base_bearing = (approach + side * 40.0) % 360.0
    return ((bearing, rng), (bearing, 45.0), (base_bearing, 14.0))


def _xy(bearing: float, rng: float) -> np.ndarray:
    b = np.radians(bearing)
    return np.array([rng * np.sin(b), rng * np.cos(b)])


def _to_lonlat(xy: np.ndarray, ref: tuple[float, float]) -> np.ndarray:
    lon0, lat0 = ref
    lat = lat0 + xy[:, 1] / 60.0
    lon = lon0 + xy[:, 0] / (60.0 * np.cos(np.radians(lat0)))
    return np.column_stack([lon, lat])


@dataclass(frozen=True)
class OpsState:
    final_speed: float
    intercept_nm: float
    runway_side: float


def _route(spec: AirportSpec, fix_idx: int, ops: OpsState, rng: np.random.Generator) -> np.ndarray:
    """Waypoints in nm (east, north) relative to the airport."""
    approach = (spec.runway_heading + 180.0) % 360.0
    lateral = _xy(approach + 90.0, 1.0) * ops.runway_side * spec.runway_offset_nm
    pts = [_xy(b, r) for b, r in spec.templates()[fix_idx]]
    for k in range(1, len(pts)):
        pts[k] = pts[k] + rng.normal(0.0, spec.lateral_sigma_nm, size=2)
    pts.append(_xy(approach, ops.intercept_nm) + lateral)
    pts.append(_xy(approach, 5.0) + lateral)
    return np.array(pts)


def _fly(spec: AirportSpec, route: np.ndarray, ops: OpsState, rng: np.random.Generator) -> np.ndarray:
    """Integrate one flight at 1 s; returns (k, 3) rows of east nm, north nm, alt ft."""
    seg = np.linalg.norm(np.diff(route, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    final_len = seg[-1]

    sp_r, sp_v = np.array(spec.nominal_speed, dtype=float).T
    de_r, de_a = np.array(spec.descent_profile, dtype=float).T
    speed_factor = 1.0 + rng.normal(0.0, spec.speed_sigma)
    wp_togo = total - cum
    wp_alt_noise = rng.normal(0.0, spec.vertical_sigma_ft, size=len(route))
    wp_alt_noise[-1] = 0.0
    final_speed = ops.final_speed * (1.0 + rng.normal(0.0, 0.01))

    # time as a function of distance flown, then sampled at whole seconds
    along_fine = np.linspace(0.0, total, max(int(total * 20), 2))
    togo_fine = total - along_fine
    blend = np.clip((togo_fine - final_len) / 5.0, 0.0, 1.0)
    v = blend * np.interp(togo_fine, sp_r, sp_v) * speed_factor + (1.0 - blend) * final_speed
    inv = 3600.0 / v
    t_fine = np.concatenate([[0.0], np.cumsum(0.5 * (inv[1:] + inv[:-1]) * np.diff(along_fine))])
    secs = np.arange(0.0, np.floor(t_fine[-1]) + 1.0)
    along = np.interp(secs, t_fine, along_fine)
    if along[-1] < total:
        along = np.append(along, total)
    togo = total - along
    x = np.interp(along, cum, route[:, 0])
    y = np.interp(along, cum, route[:, 1])
    alt = np.interp(togo, de_r, de_a) + np.interp(togo, wp_togo[::-1], wp_alt_noise[::-1])
    return np.column_stack([x, y, alt])


def _ops_state(spec: AirportSpec, rng: np.random.Generator) -> OpsState:
    return OpsState(
        final_speed=float(rng.uniform(*spec.final_speed_range)),
        intercept_nm=float(rng.uniform(*spec.intercept_range_nm)),
        runway_side=float(rng.choice([-1.0, 1.0])),
    )


def generate_day(spec: AirportSpec, day: int, seed: int, start_epoch: int = EPOCH_2019) -> TrafficDay:
    rng = np.random.default_rng([seed, day])
    day_start = start_epoch + 86400 * day
    lo, hi = spec.operating_hours
    hours = range(lo, hi)
    ops = {h: _ops_state(spec, rng) for h in hours}
    candidates = []
    for h in hours:
        k = rng.poisson(spec.arrival_rate)
        times = np.sort(rng.uniform(0.0, 3600.0, size=k))
        fixes = rng.integers(0, len(spec.entry_fixes), size=k)
        candidates += [(day_start + 3600 * h + float(t), int(f)) for t, f in zip(times, fixes)]
    candidates.sort()

    last_entry: dict[int, float] = {}
    entries = []
    for t, f in candidates:
        t = float(np.ceil(t))
        if f in last_entry and t < last_entry[f] + spec.separation_s:
            t = last_entry[f] + spec.separation_s
        last_entry[f] = t
        entries.append((f, t))

    date = (datetime.fromtimestamp(day_start, tz=timezone.utc)).strftime("%Y-%m-%d")
    flown = []
    for f, t_entry in entries:
        hour = min(max(int((t_entry - day_start) // 3600), lo), hi - 1)
        route = _route(spec, f, ops[hour], rng)
        flown.append(_fly(spec, route, ops[hour], rng))

    # sequence to the runway in order of undelayed arrival
    ahead = None
    for k in sorted(range(len(entries)), key=lambda k: (entries[k][1] + len(flown[k]), k)):
        t_entry = entries[k][1]
        if ahead is not None:
            flown[k] = _space_behind(spec, flown[k], t_entry, *ahead)
        ahead = (flown[k], t_entry)

    out = TrafficDay(date=date, entries=entries)
    for k, (f, t_entry) in enumerate(entries):
        out.tracks.append(_sample(spec, f"{spec.name}{day:03d}{k:04d}", t_entry, flown[k], rng))
    out.tracks.sort(key=lambda tr: (tr.samples[0, 0], tr.flight_id))
    return out


def _togo(states: np.ndarray) -> np.ndarray:
    step = np.linalg.norm(np.diff(states[:, :2], axis=0), axis=1)
    return np.concatenate([np.cumsum(step[::-1])[::-1], [0.0]])


def _space_behind(spec: AirportSpec, states: np.ndarray, t_entry: float, lead: np.ndarray, lead_entry: float) -> np.ndarray:
    """Delay a flight so it crosses every distance to go inside the merge range
    at least ``runway_spacing_s`` after the flight ahead.

    The delay builds up at no more than ``max_slowdown`` seconds per second
    flown and never shrinks. Returns states re-sampled at whole seconds from
    the entry time.
    """
    togo, lead_togo = _togo(states), _togo(lead)
    t = t_entry + np.arange(len(states), dtype=float)
    lead_t = np.interp(togo, lead_togo[::-1], (lead_entry + np.arange(len(lead), dtype=float))[::-1])
    inside = (togo <= spec.merge_range_nm) & (togo <= lead_togo[0])
    need = np.where(inside, np.maximum(lead_t + spec.runway_spacing_s - t, 0.0), 0.0)
    if not need.any():
        return states
    delay = need.copy()
    for i in range(len(delay) - 2, -1, -1):  # spread each requirement backwards at the slowdown rate
        delay[i] = max(delay[i], delay[i + 1] - spec.max_slowdown)
    # a requirement too large to absorb in flight leaves the aircraft waiting at its entry point
    delay = np.maximum.accumulate(delay)
    tau = np.arange(len(states)) + delay
    secs = np.arange(0.0, np.floor(tau[-1]) + 1.0)
    if secs[-1] < tau[-1]:
        secs = np.append(secs, tau[-1])
    return np.column_stack([np.interp(secs, tau, states[:, c]) for c in range(states.shape[1])])


def _sample(spec: AirportSpec, fid: str, t_entry: float, states: np.ndarray, rng) -> RawTrack:
    n = len(states)
    lo, hi = spec.sample_gap_s
    gaps = rng.integers(lo, hi + 1, size=n // lo + 2)
    idx = np.concatenate([[0], np.cumsum(gaps)])
    idx = idx[idx < n - 1]
    idx = np.append(idx, n - 1)
    lonlat = _to_lonlat(states[idx, :2], spec.ref_point)
    lonlat = lonlat + rng.normal(0.0, spec.measurement_sigma_deg, size=lonlat.shape)
    alt = states[idx, 2] + rng.normal(0.0, spec.measurement_sigma_ft, size=len(idx))
    samples = np.column_stack([t_entry + idx, lonlat, alt])
    return RawTrack(fid, samples)


def generate(spec: AirportSpec, days: int, seed: int, start_epoch: int = EPOCH_2019) -> list[TrafficDay]:
    return [generate_day(spec, d, seed, start_epoch) for d in range(days)]


def make_airport_family(seed: int = 0) -> dict[str, AirportSpec]:
    """Three airports: a large one, a similar smaller one, and a differently operated small one.

    Arrival rates follow the 418 : 155 : 111 trajectory ratio of the reference
    dataset.
    """
    rng = np.random.default_rng(seed)
    base_rate = 16.0
    fixes = tuple((float(b + rng.uniform(-10, 10)), 76.0) for b in (20.0, 110.0, 200.0, 290.0))
    rwy = float(330.0 + rng.uniform(-10, 10))
    a = AirportSpec(name="A", ref_point=(126.45, 37.46), runway_heading=rwy, entry_fixes=fixes, arrival_rate=base_rate)
    rot_b = float(rng.uniform(-5, 5))
    b = replace(
        a,
        name="B",
        ref_point=(126.80, 37.56),
        entry_fixes=tuple(((bb + rot_b) % 360.0, r) for bb, r in fixes),
        runway_heading=(rwy + rot_b) % 360.0,
        arrival_rate=base_rate * 155.0 / 418.0,
    )
    c_fixes = tuple(((bb + 135.0) % 360.0, r) for bb, r in fixes[:3])
    c = replace(
        a,
        name="C",
        ref_point=(128.94, 35.18),
        entry_fixes=c_fixes,
        runway_heading=(rwy + 180.0) % 360.0,
        arrival_rate=base_rate * 111.0 / 418.0,
        final_speed_range=(135.0, 175.0),
        intercept_range_nm=(7.0, 11.0),
    )
    return {"A": a, "B": b, "C": c}


def bearing_difference(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def separation_violations(day: TrafficDay, spec: AirportSpec) -> int:
    last: dict[int, float] = {}
    bad = 0
    for f, t in sorted(day.entries, key=lambda e: e[1]):
        if f in last and t - last[f] < spec.separation_s - 1e-9:
            bad += 1
        last[f] = t
    return bad


def max_range_nm(day: TrafficDay, spec: AirportSpec) -> float:
    if not day.tracks:
        return 0.0
    return float(max(np.max(horizontal_error(tr.samples[:, 1:3], np.asarray(spec.ref_point))) for tr in day.tracks))

