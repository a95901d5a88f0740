"""Static indoor scene, propagation paths, geometric channel and beam alignment.

The scene is a rectangular room with a wall-mounted access point and circular
blockers. Per location we enumerate the line-of-sight path plus one specular
reflection per wall (image method), draw narrowband channel matrices from the
resulting path set, exhaustively align analog beams over the arcsin codebooks,
and summarize each location as an expected per-slot rate and an empirical
packet-departure distribution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

# Path slot ids used for common-random-number draws: the same physical path
# always consumes the same gaussian stream slot, with or without blockers.
LOS_SLOT = 0
N_WALLS = 4
N_PATH_SLOTS = 1 + N_WALLS


def thermal_noise_w(bandwidth_hz: float) -> float:
    """Thermal noise power over a bandwidth (-174 dBm/Hz noise density)."""
    return 10.0 ** ((-174.0 + 10.0 * math.log10(bandwidth_hz)) / 10.0) / 1000.0


@dataclass
class SceneConfig:
    """Static scene: room geometry, radio constants, slotting."""

    room_width: float = 9.0
    room_height: float = 7.5
    ap_position: tuple[float, float] = (4.5, 0.0)
    blockers: tuple[tuple[float, float, float], ...] = (
        (1.5, 2.0, 0.5),
        (4.5, 2.0, 0.5),
        (7.5, 2.0, 0.5),
    )
    carrier_frequency_hz: float = 60e9
    bandwidth_hz: float = 800e6
    noise_power_w: float | None = None   # default: thermal noise over bandwidth_hz
    tx_power_w: float = 1.0
    n_tx_antennas: int = 64
    n_rx_antennas: int = 64
    reflection_loss_db: float = 10.0
    slot_duration_s: float = 3.008e-3
    packet_bits: float = 1e6

    def __post_init__(self):
        if self.noise_power_w is None:
            self.noise_power_w = thermal_noise_w(self.bandwidth_hz)
        if self.room_width <= 0 or self.room_height <= 0:
            raise ValueError("room dimensions must be positive")
        if self.n_tx_antennas < 1 or self.n_rx_antennas < 1:
            raise ValueError("antenna counts must be >= 1")
        for p in (self.tx_power_w, self.noise_power_w, self.carrier_frequency_hz,
                  self.bandwidth_hz, self.slot_duration_s, self.packet_bits):
            if p <= 0:
                raise ValueError("powers, frequencies and durations must be positive")
        for (cx, cy, r) in self.blockers:
            if r <= 0:
                raise ValueError("blocker radius must be positive")
            if not (0.0 <= cx <= self.room_width and 0.0 <= cy <= self.room_height):
                raise ValueError(f"blocker ({cx}, {cy}) lies outside the room")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency_hz

    @property
    def bits_per_slot_hz(self) -> float:
        """T * W: bits per slot per unit spectral efficiency."""
        return self.slot_duration_s * self.bandwidth_hz


def scene_from_dict(d: dict) -> SceneConfig:
    kwargs = {}
    floats = ("room_width", "room_height", "carrier_frequency_hz", "bandwidth_hz",
              "noise_power_w", "tx_power_w", "reflection_loss_db",
              "slot_duration_s", "packet_bits")
    for key in floats:
        if key in d:
            kwargs[key] = float(d[key])   # YAML "1.0e9" without a sign is a string
    for key in ("n_tx_antennas", "n_rx_antennas"):
        if key in d:
            kwargs[key] = int(d[key])
    if "ap_position" in d:
        kwargs["ap_position"] = tuple(float(v) for v in d["ap_position"])
    if "blockers" in d:
        kwargs["blockers"] = tuple(tuple(float(v) for v in b) for b in d["blockers"])
    return SceneConfig(**kwargs)


def scene_from_yaml(path: str) -> SceneConfig:
    import yaml

    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return scene_from_dict(doc.get("scene", doc))


@dataclass(frozen=True)
class PropPath:
    """One propagation path from an agent location to the AP."""

    aod: float          # departure angle at the agent array, radians off broadside
    aoa: float          # arrival angle at the AP array, radians off broadside
    gain: float         # average power gain sigma_i^2, linear
    kind: str           # "los" or "wall"
    slot: int           # stable draw-slot identity (0 = LoS, 1..4 = wall index + 1)


@dataclass
class PathSet:
    location_index: int
    location: tuple[float, float]
    paths: list[PropPath] = field(default_factory=list)

    @property
    def has_los(self) -> bool:
        return any(p.kind == "los" for p in self.paths)

    @property
    def total_gain(self) -> float:
        return float(sum(p.gain for p in self.paths))


@dataclass(frozen=True)
class BeamPair:
    """Codebook indices, 1-based: precoder p in 1..N_T, combiner q in 1..N_R."""

    p: int
    q: int


@dataclass
class LinkStats:
    location_index: int
    beam: BeamPair
    expected_rate_bits: float
    departure_pmf: np.ndarray   # probabilities over packet counts 0..d_max

    def __post_init__(self):
        self.departure_pmf = np.asarray(self.departure_pmf, dtype=float)
        if self.departure_pmf.ndim != 1 or len(self.departure_pmf) == 0:
            raise ValueError("departure_pmf must be a non-empty vector")
        if (self.departure_pmf < 0).any():
            raise ValueError("departure_pmf entries must be >= 0")
        if abs(self.departure_pmf.sum() - 1.0) > 1e-9:
            raise ValueError("departure_pmf must sum to 1")


# ──────────────────────────────────────────────────────────────────────
#  Path enumeration (LoS + first-order wall reflections, image method)
# ──────────────────────────────────────────────────────────────────────

def _point_segment_distance(point, a, b) -> float:
    p = np.asarray(point, float)
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.hypot(*(p - a)))
    t = float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.hypot(*(p - (a + t * ab))))


def _segment_clear(scene: SceneConfig, a, b) -> bool:
    """True when the segment a-b intersects no blocker disk (tangency passes)."""
    for (cx, cy, r) in scene.blockers:
        if _point_segment_distance((cx, cy), a, b) < r:
            return False
    return True


def free_space_gain(scene: SceneConfig, distance: float) -> float:
    return (scene.wavelength / (4.0 * math.pi * distance)) ** 2


def _ap_arrival_angle(scene: SceneConfig, source) -> float:
    """Angle at the AP array (broadside +y) of a ray arriving from `source`."""
    u = np.asarray(source, float) - np.asarray(scene.ap_position, float)
    return math.atan2(u[0], u[1])


def _agent_departure_angle(location, ap_position, target) -> float:
    """Angle at the agent array; broadside points from the agent toward the AP."""
    n = np.asarray(ap_position, float) - np.asarray(location, float)
    v = np.asarray(target, float) - np.asarray(location, float)
    cross = n[0] * v[1] - n[1] * v[0]
    dot = n[0] * v[0] + n[1] * v[1]
    return math.atan2(cross, dot)


def _walls(scene: SceneConfig):
    # (axis, coordinate, wall index): axis 0 -> vertical wall x=c, axis 1 -> horizontal y=c
    return ((0, 0.0, 0), (0, scene.room_width, 1), (1, 0.0, 2), (1, scene.room_height, 3))


def enumerate_paths(scene: SceneConfig, location, location_index: int = -1) -> PathSet:
    """Enumerate the LoS path and one specular reflection per wall.

    The LoS path exists iff the agent-AP segment clears every blocker. A wall
    reflection exists iff the mirror-image segment crosses the wall at an
    interior point and both legs clear the blockers. Gains follow free-space
    pathloss over the unfolded path length, with ``reflection_loss_db`` added
    per bounce.

    Raises ``ValueError`` for locations outside the room or at the AP.
    """
    loc = np.asarray(location, dtype=float)
    ap = np.asarray(scene.ap_position, dtype=float)
    if not (0.0 <= loc[0] <= scene.room_width and 0.0 <= loc[1] <= scene.room_height):
        raise ValueError(f"location {tuple(loc)} lies outside the room")
    if np.allclose(loc, ap):
        raise ValueError("agent location coincides with the AP position")

    paths: list[PropPath] = []
    if _segment_clear(scene, loc, ap):
        d = float(np.hypot(*(ap - loc)))
        paths.append(PropPath(
            aod=_agent_departure_angle(loc, ap, ap),
            aoa=_ap_arrival_angle(scene, loc),
            gain=free_space_gain(scene, d),
            kind="los",
            slot=LOS_SLOT,
        ))

    refl_gain_factor = 10.0 ** (-scene.reflection_loss_db / 10.0)
    for axis, coord, wall_idx in _walls(scene):
        image = loc.copy()
        image[axis] = 2.0 * coord - image[axis]
        span = ap[axis] - image[axis]
        if span == 0.0:
            continue        # image segment parallel to or inside the wall plane
        t = (coord - image[axis]) / span
        if not (0.0 < t < 1.0):
            continue        # reflection point not strictly between image and AP
        refl = image + t * (ap - image)
        other = 1 - axis
        if not (0.0 <= refl[other] <= (scene.room_width, scene.room_height)[other]):
            continue        # reflection point off the wall segment
        if np.allclose(refl, loc) or np.allclose(refl, ap):
            continue        # grazing geometry, no physical bounce
        if not (_segment_clear(scene, loc, refl) and _segment_clear(scene, refl, ap)):
            continue
        d_total = float(np.hypot(*(ap - image)))
        paths.append(PropPath(
            aod=_agent_departure_angle(loc, ap, refl),
            aoa=_ap_arrival_angle(scene, refl),
            gain=free_space_gain(scene, d_total) * refl_gain_factor,
            kind="wall",
            slot=1 + wall_idx,
        ))
    return PathSet(location_index=location_index, location=(float(loc[0]), float(loc[1])),
                   paths=paths)


# ──────────────────────────────────────────────────────────────────────
#  Array responses, codebooks, channel draws
# ──────────────────────────────────────────────────────────────────────

def array_response(angle: float, n: int) -> np.ndarray:
    """Unit-norm ULA steering vector, element m: exp(-j*pi*m*sin(angle))/sqrt(n)."""
    if n < 1:
        raise ValueError("antenna count must be >= 1")
    return np.exp(-1j * math.pi * np.arange(n) * math.sin(angle)) / math.sqrt(n)


def codebook_angles(n: int) -> np.ndarray:
    """Beam angles arcsin(2*(p-1)/n - 1) for p = 1..n."""
    if n < 1:
        raise ValueError("antenna count must be >= 1")
    return np.arcsin(2.0 * np.arange(n) / n - 1.0)


def codebook_matrix(n: int) -> np.ndarray:
    """Columns are the n codebook steering vectors (n x n)."""
    return np.stack([array_response(a, n) for a in codebook_angles(n)], axis=1)


def _draw_slot_gains(rng: np.random.Generator, n_samples: int) -> np.ndarray:
    """CN(0,1) draws for every potential path slot, (n_samples, N_PATH_SLOTS).

    Drawing all slots regardless of which paths exist keeps a given physical
    path's fading coupled across scene variants (common random numbers).
    """
    z = rng.standard_normal((n_samples, N_PATH_SLOTS, 2))
    return (z[..., 0] + 1j * z[..., 1]) / math.sqrt(2.0)


def sample_channel(scene: SceneConfig, paths: PathSet, rng: np.random.Generator) -> np.ndarray:
    """Draw one channel matrix H (N_R x N_T); empty path sets give zeros."""
    n_r, n_t = scene.n_rx_antennas, scene.n_tx_antennas
    slot_gains = _draw_slot_gains(rng, 1)[0]
    h = np.zeros((n_r, n_t), dtype=complex)
    scale = math.sqrt(n_t * n_r)
    for p in paths.paths:
        alpha = math.sqrt(p.gain) * slot_gains[p.slot]
        h += scale * alpha * np.outer(array_response(p.aoa, n_r),
                                      array_response(p.aod, n_t).conj())
    return h


def max_departures(scene: SceneConfig, paths: PathSet) -> int:
    """Packet-count cap from the rate at the average total path power.

    Jensen's inequality puts the expected rate below this value; instantaneous
    draws above it are clipped when histogramming departures so the support
    stays finite (the queue cap absorbs any difference downstream).
    """
    g = paths.total_gain
    if g <= 0.0:
        return 0
    snr = scene.tx_power_w * scene.n_tx_antennas * scene.n_rx_antennas * g / scene.noise_power_w
    return int(math.ceil(scene.bits_per_slot_hz * math.log2(1.0 + snr) / scene.packet_bits))


def align_beams(scene: SceneConfig, paths: PathSet, n_samples: int,
                rng: np.random.Generator) -> tuple[BeamPair, LinkStats]:
    """Exhaustive codebook search maximizing the expected log rate.

    Every precoder/combiner pair is scored on the same ``n_samples`` channel
    draws (common random numbers); ties resolve to the lowest (p, q). Returns
    the winning pair together with the induced expected rate and the empirical
    packet-departure distribution.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n_r, n_t = scene.n_rx_antennas, scene.n_tx_antennas

    if not paths.paths:
        stats = LinkStats(paths.location_index, BeamPair(1, 1), 0.0, np.array([1.0]))
        return BeamPair(1, 1), stats

    a_r = np.stack([array_response(p.aoa, n_r) for p in paths.paths], axis=1)   # (N_R, P)
    a_t = np.stack([array_response(p.aod, n_t) for p in paths.paths], axis=1)   # (N_T, P)
    sigmas = np.array([math.sqrt(p.gain) for p in paths.paths])
    slots = np.array([p.slot for p in paths.paths])

    cb_r = codebook_matrix(n_r)
    cb_t = codebook_matrix(n_t)
    coup_r = cb_r.conj().T @ a_r                     # (N_R, P): w_q^H a_R(phi_i)
    coup_t = (cb_t.conj().T @ a_t).conj()            # (N_T, P): a_T(theta_i)^H f_p

    scale = math.sqrt(n_t * n_r)
    snr_coef = scene.tx_power_w / scene.noise_power_w
    bits_coef = scene.bits_per_slot_hz

    mean_rate = np.zeros((n_t, n_r))
    chunk = max(1, min(n_samples, (1 << 21) // (n_t * n_r)))
    slot_gains = _draw_slot_gains(rng, n_samples)
    alphas = sigmas * slot_gains[:, slots]           # (n_samples, P)
    for start in range(0, n_samples, chunk):
        a = alphas[start:start + chunk]
        m = scale * np.einsum("ni,pi,qi->npq", a, coup_t, coup_r)
        mean_rate += bits_coef * np.log2(1.0 + snr_coef * np.abs(m) ** 2).sum(axis=0)
    mean_rate /= n_samples

    flat = int(np.argmax(mean_rate))                 # row-major: lowest (p, q) on ties
    p_idx, q_idx = divmod(flat, n_r)
    beam = BeamPair(p_idx + 1, q_idx + 1)

    gains = scale * (alphas @ (coup_t[p_idx] * coup_r[q_idx]))
    rates = bits_coef * np.log2(1.0 + snr_coef * np.abs(gains) ** 2)
    d_cap = max_departures(scene, paths)
    counts = np.minimum(np.floor(rates / scene.packet_bits).astype(int), d_cap)
    pmf = np.bincount(counts, minlength=d_cap + 1).astype(float) / n_samples
    stats = LinkStats(paths.location_index, beam, float(rates.mean()), pmf)
    return beam, stats


# ──────────────────────────────────────────────────────────────────────
#  Per-location statistics table
# ──────────────────────────────────────────────────────────────────────

LINK_STATS_VERSION = 1


@dataclass
class LinkStatsTable:
    """Precomputed LinkStats for every grid location."""

    stats: dict[int, LinkStats]

    def __len__(self):
        return len(self.stats)

    @property
    def d_max(self) -> int:
        return max(len(s.departure_pmf) for s in self.stats.values()) - 1

    def pmf_matrix(self) -> np.ndarray:
        """(n_locations, d_max+1) departure pmfs, zero-padded on the right."""
        n = len(self.stats)
        out = np.zeros((n, self.d_max + 1))
        for idx, s in self.stats.items():
            out[idx, :len(s.departure_pmf)] = s.departure_pmf
        return out

    def expected_rates(self) -> np.ndarray:
        return np.array([self.stats[i].expected_rate_bits for i in range(len(self.stats))])

    @classmethod
    def precompute(cls, scene: SceneConfig, points, seed: int,
                   n_samples: int = 1000) -> "LinkStatsTable":
        """Align beams and histogram departures for every grid point."""
        from .rng import substream

        stats = {}
        for idx, point in enumerate(points):
            ps = enumerate_paths(scene, point, location_index=idx)
            _, ls = align_beams(scene, ps, n_samples, substream(seed, "environment-mc", idx))
            stats[idx] = ls
        return cls(stats)

    @classmethod
    def from_fixed_rates(cls, rates_bits, packet_bits: float) -> "LinkStatsTable":
        """Deterministic-rate mode from fixed per-location rates in bits/slot."""
        stats = {}
        for idx, rate in enumerate(rates_bits):
            d = int(math.floor(rate / packet_bits))
            pmf = np.zeros(d + 1)
            pmf[d] = 1.0
            stats[idx] = LinkStats(idx, BeamPair(1, 1), float(rate), pmf)
        return cls(stats)

    @classmethod
    def from_fixed_departures(cls, packets) -> "LinkStatsTable":
        """Deterministic-rate mode from fixed per-location packet counts."""
        stats = {}
        for idx, d in enumerate(packets):
            pmf = np.zeros(int(d) + 1)
            pmf[int(d)] = 1.0
            stats[idx] = LinkStats(idx, BeamPair(1, 1), float(d), pmf)
        return cls(stats)

    def to_json(self, path: str):
        doc = {"version": LINK_STATS_VERSION, "locations": {}}
        for idx in sorted(self.stats):
            s = self.stats[idx]
            doc["locations"][str(idx)] = {
                "beam": {"p": s.beam.p, "q": s.beam.q},
                "expected_rate_bits": s.expected_rate_bits,
                "departure_pmf": [float(v) for v in s.departure_pmf],
            }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path: str) -> "LinkStatsTable":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("version") != LINK_STATS_VERSION:
            raise ValueError(f"unsupported link-stats version {doc.get('version')!r}")
        stats = {}
        for key, entry in doc["locations"].items():
            idx = int(key)
            stats[idx] = LinkStats(idx, BeamPair(**entry["beam"]),
                                   entry["expected_rate_bits"],
                                   np.asarray(entry["departure_pmf"]))
        return cls(stats)
