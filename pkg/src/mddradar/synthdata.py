"""Synthetic range/Doppler spectrograms for human activities under FMCW configurations.

Each activity is a small set of point-like body parts whose radial velocity
is a bulk drift plus a class-specific sum of sinusoids.  A sample is
rendered on the native grid of a radar configuration (range bins from the
range resolution, Doppler bins from the speed resolution, one column per
frame), passed through a simple sensor model, then cropped to the common
window (0-2 s, 0-4.8 m, -5..5 m/s), bilinearly resampled and min-max scaled.

The sensor model is where configurations differ beyond grid geometry:

* every body part is a Gaussian blob whose amplitude carries two-way path
  loss and an IF anti-alias roll-off approaching ``max_range_m``;
* the range map goes through exponential background subtraction with a
  fixed per-frame factor, so its time constant scales with the frame period;
* receiver noise is circular complex Gaussian whose level follows the
  processing gain, ``noise_sigma * sqrt(256*64 / (n_s * n_c))``;
* maps are log-magnitude (dB), floored 40 dB below their peak;
* a static wall sits behind the crop window.  It never appears in the
  cropped maps, but when it lies inside the radar's range extent it sets
  the receiver full scale and everything more than 35 dB below it is lost.

All randomness comes from :class:`XorShift64Star`, never from numpy's global
state, so a ``(class_id, config, seed)`` triple pins a sample down exactly.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import ContractError

CLASS_NAMES = ("standing", "waving", "walking", "boxing", "boxing_walking")

WINDOW_S = 2.0
RANGE_SCOPE_M = (0.0, 4.8)
SPEED_SCOPE_MPS = (-5.0, 5.0)

DATASET_MAGIC = b"MDDRAD01"


class CoverageError(ValueError):
    """The native map does not cover the common crop window."""


class DatasetFormatError(ValueError):
    pass


# --- PRNG ----------------------------------------------------------------

_M64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One step of SplitMix64; used to expand seeds into lane states."""
    x = (x + 0x9E3779B97F4A7C15) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def mix_seed(*parts: int) -> int:
    h = 0x243F6A8885A308D3
    for p in parts:
        h = splitmix64(h ^ (int(p) & _M64))
    return h


class XorShift64Star:
    """Lane-parallel xorshift64* (shifts 12, 25, 27; multiplier 0x2545F4914F6CDD1D).

    ``lanes`` independent generators, each seeded by SplitMix64 from
    ``seed``, advance in lockstep; draws are read lane-major per step.
    """

    MULT = np.uint64(0x2545F4914F6CDD1D)

    def __init__(self, seed: int, lanes: int = 64):
        states = []
        s = int(seed) & _M64
        for _ in range(lanes):
            s = splitmix64(s)
            states.append(s or 1)
        self.state = np.array(states, dtype=np.uint64)

    def next_u64(self) -> np.ndarray:
        x = self.state
        x ^= x >> np.uint64(12)
        x ^= x << np.uint64(25)
        x ^= x >> np.uint64(27)
        self.state = x
        return x * self.MULT

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) with 53 random bits each."""
        steps = -(-n // self.state.size) if n else 0
        if steps == 0:
            return np.empty(0)
        raw = np.concatenate([self.next_u64() for _ in range(steps)])[:n]
        return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform_range(self, lo: float, hi: float) -> float:
        return float(lo + (hi - lo) * self.uniform(1)[0])

    def normal(self, n: int) -> np.ndarray:
        """Box-Muller standard normals."""
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u[m:]
        return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]


# --- configurations ------------------------------------------------------


@dataclass(frozen=True)
class RadarConfigSpec:
    name: str
    chirps_per_frame: int
    samples_per_chirp: int
    bandwidth_ghz: float
    frame_period_ms: float
    range_resolution_cm: float
    max_range_m: float
    max_speed_mps: float
    speed_resolution_mps: float
    noise_sigma: float = 0.05

    def __post_init__(self):
        positive = (
            "chirps_per_frame",
            "samples_per_chirp",
            "bandwidth_ghz",
            "frame_period_ms",
            "range_resolution_cm",
            "max_range_m",
            "max_speed_mps",
            "speed_resolution_mps",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ContractError(f"{self.name}: {name} must be positive")
        if self.noise_sigma < 0:
            raise ContractError(f"{self.name}: noise_sigma must be >= 0")
        if self.max_range_m < RANGE_SCOPE_M[1]:
            raise ContractError(f"{self.name}: max_range_m must cover {RANGE_SCOPE_M[1]} m")

    @property
    def range_bins(self) -> int:
        return int(round(self.max_range_m / (self.range_resolution_cm / 100.0)))

    @property
    def doppler_bins(self) -> int:
        return int(math.ceil(2 * self.max_speed_mps / self.speed_resolution_mps - 1e-9))

    @property
    def frames(self) -> int:
        return int(math.ceil(WINDOW_S / (self.frame_period_ms / 1000.0) - 1e-9)) + 1


PRESETS: dict[str, RadarConfigSpec] = {
    "I": RadarConfigSpec("I", 64, 256, 2.0, 50.0, 7.5, 6.2, 5.0, 0.15),
    "II": RadarConfigSpec("II", 64, 256, 1.0, 32.0, 15.0, 12.5, 5.0, 0.15),
    "III": RadarConfigSpec("III", 64, 128, 2.0, 32.0, 7.5, 4.8, 5.0, 0.15),
    "IV": RadarConfigSpec("IV", 64, 256, 2.0, 32.0, 7.5, 6.2, 5.0, 0.15),
}


def preset(name: str) -> RadarConfigSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# --- activity kinematics -------------------------------------------------


@dataclass(frozen=True)
class Activity:
    base_hz: float
    harmonics: int
    amplitude_mps: float  # micro-motion peak velocity of the limbs
    drift_mps: float  # bulk radial velocity (negative: approaching)
    start_range_m: tuple[float, float]
    # (relative reflectivity, phase offset in cycles) per limb
    limbs: tuple[tuple[float, float], ...]


ACTIVITIES = (
    Activity(0.3, 1, 0.08, 0.0, (1.2, 3.8), ((0.3, 0.0),)),
    Activity(1.0, 2, 0.7, 0.0, (1.2, 3.8), ((0.8, 0.0),)),
    Activity(1.8, 3, 1.5, -1.3, (3.2, 4.3), ((0.45, 0.0), (0.45, 0.5))),
    Activity(2.6, 2, 4.0, 0.0, (1.2, 3.8), ((0.5, 0.0), (0.5, 0.5))),
    Activity(2.6, 2, 4.0, -0.8, (2.2, 3.8), ((0.5, 0.0), (0.5, 0.5))),
)

BODY_DEPTH_M = 0.12
BODY_SPREAD_MPS = 0.25
TORSO_MICRO = 0.15
LIMB_SEGMENTS = (0.25, 0.5, 0.75, 1.0)
CLUTTER_ALPHA = 0.9
ROLLOFF_ORDER = 4
ROLLOFF_KNEE = 0.9
REFERENCE_GAIN = 256 * 64
REFERENCE_RANGE_M = 1.0
WALL_RANGE_M = (5.0, 6.0)
WALL_REFLECTIVITY = 20.0
DYNAMIC_RANGE_DB = 40.0
ADC_RANGE_DB = 35.0


@dataclass(frozen=True)
class NativeSpectrogram:
    """Maps on a radar's own grid; rows are range/Doppler bins, columns are frames."""

    x_r: np.ndarray
    x_d: np.ndarray
    range_axis: np.ndarray  # bin centres, m
    doppler_axis: np.ndarray  # bin centres, m/s
    time_axis: np.ndarray  # frame instants, s
    range_extent: tuple[float, float]
    doppler_extent: tuple[float, float]
    time_extent: tuple[float, float]


@dataclass(frozen=True)
class SpectrogramSample:
    x_r: np.ndarray
    x_d: np.ndarray
    label: int | None
    config_name: str


def _check_class(class_id: int, k: int = len(ACTIVITIES)) -> None:
    if not 0 <= class_id < k:
        raise ContractError(f"class_id must be in [0, {k}), got {class_id}")


def _tracks(act: Activity, t: np.ndarray, rng: XorShift64Star):
    """Per-part (reflectivity, range(t), velocity(t)) for one jittered performance."""
    f0 = act.base_hz * rng.uniform_range(0.85, 1.15)
    amp = act.amplitude_mps * rng.uniform_range(0.8, 1.2)
    drift = act.drift_mps * rng.uniform_range(0.8, 1.2)
    r0 = rng.uniform_range(*act.start_range_m)
    phases = 2 * np.pi * rng.uniform(act.harmonics)
    parts = []
    micro_v = []
    micro_r = []
    for limb_refl, limb_phase in act.limbs:
        v = np.zeros_like(t)
        r = np.zeros_like(t)
        for h in range(1, act.harmonics + 1):
            w = 2 * np.pi * h * f0
            ph = phases[h - 1] + 2 * np.pi * h * limb_phase
            v += (amp / h) * np.sin(w * t + ph)
            r += -(amp / h) / w * (np.cos(w * t + ph) - np.cos(ph))
        micro_v.append(v)
        micro_r.append(r)
        parts.append(limb_refl)
    bulk_r = r0 + drift * t
    torso_v = drift + TORSO_MICRO * np.mean(micro_v, axis=0)
    torso_r = bulk_r + TORSO_MICRO * np.mean(micro_r, axis=0)
    out = [(1.0, torso_r, torso_v)]
    for refl, v, r in zip(parts, micro_v, micro_r):
        # a limb is a chain of segments moving at fractions of the tip velocity
        for frac in LIMB_SEGMENTS:
            out.append((refl, bulk_r + frac * r, drift + frac * v))
    return out


def _gauss(axis: np.ndarray, centres: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-0.5 * ((axis[:, None] - centres[None, :]) / sigma) ** 2)


def _path_gain(r):
    """Two-way spreading loss, amplitude."""
    return 1.0 / np.maximum(r, 0.3)


def _if_gain(r, config: RadarConfigSpec):
    """IF anti-alias filter: gain rolls off approaching the maximum range."""
    knee = ROLLOFF_KNEE * config.max_range_m
    return 1.0 / np.sqrt(1.0 + (np.asarray(r) / knee) ** (2 * ROLLOFF_ORDER))


def _to_db(amp: np.ndarray, sigma: float, rng: XorShift64Star) -> np.ndarray:
    """Magnitude of signal plus circular complex noise, in dB, floored ``DYNAMIC_RANGE_DB`` below the peak."""
    if sigma > 0:
        n = rng.normal(2 * amp.size).reshape((2,) + amp.shape)
        amp = np.hypot(amp + sigma * n[0], sigma * n[1])
    db = 20.0 * np.log10(np.maximum(amp, 1e-12))
    return np.maximum(db, db.max() - DYNAMIC_RANGE_DB)


def render_native(class_id: int, config: RadarConfigSpec, rng_seed: int) -> NativeSpectrogram:
    """Render one activity on ``config``'s native grid, sensor effects included."""
    _check_class(class_id)
    rng = XorShift64Star(mix_seed(rng_seed, class_id))
    dr = config.range_resolution_cm / 100.0
    dv = config.speed_resolution_mps
    tf = config.frame_period_ms / 1000.0
    nr, nv, nt = config.range_bins, config.doppler_bins, config.frames
    range_axis = (np.arange(nr) + 0.5) * dr
    doppler_axis = (np.arange(nv) - nv / 2 + 0.5) * dv
    t = np.arange(nt) * tf

    sig_r = math.hypot(BODY_DEPTH_M, 0.5 * dr)
    sig_v = math.hypot(BODY_SPREAD_MPS, 0.5 * dv)
    x_r = np.zeros((nr, nt))
    x_d = np.zeros((nv, nt))
    for refl, r, v in _tracks(ACTIVITIES[class_id], t, rng):
        amp = refl * _path_gain(r) * _if_gain(r, config)
        x_r += amp * _gauss(range_axis, r, sig_r)
        x_d += amp * _gauss(doppler_axis, v, sig_v)

    # a static wall behind the crop window; when it lies inside the radar's
    # range extent it sets the ADC full scale (see below)
    wall = rng.uniform_range(*WALL_RANGE_M)
    wall_refl = WALL_REFLECTIVITY * rng.uniform_range(0.8, 1.2)
    wall_amp = 0.0
    if wall < nr * dr:
        wall_amp = wall_refl * _path_gain(wall) * _if_gain(np.array(wall), config)

    # exponential background subtraction, fixed factor per frame
    bg = x_r[:, 0].copy()
    for j in range(nt):
        bg = CLUTTER_ALPHA * bg + (1.0 - CLUTTER_ALPHA) * x_r[:, j]
        x_r[:, j] = np.abs(x_r[:, j] - bg)

    # amplitudes relative to a unit reflector at the reference range, so path
    # loss and the IF roll-off both cost SNR
    x_r *= REFERENCE_RANGE_M
    x_d *= REFERENCE_RANGE_M
    sigma = config.noise_sigma * math.sqrt(REFERENCE_GAIN / (config.samples_per_chirp * config.chirps_per_frame))
    x_r = _to_db(x_r, sigma, rng)
    x_d = _to_db(x_d, sigma, rng)
    if wall_amp > 0:
        # the receiver gain is set by the strongest in-band return, so weak
        # body returns sink into the quantisation floor below it
        floor = 20.0 * math.log10(REFERENCE_RANGE_M * wall_amp) - ADC_RANGE_DB
        x_r = np.maximum(x_r, floor)
        x_d = np.maximum(x_d, floor)

    return NativeSpectrogram(
        x_r=x_r,
        x_d=x_d,
        range_axis=range_axis,
        doppler_axis=doppler_axis,
        time_axis=t,
        range_extent=(0.0, nr * dr),
        doppler_extent=(-nv * dv / 2, nv * dv / 2),
        time_extent=(0.0, t[-1]),
    )


# --- crop / resample / scale --------------------------------------------


def _interp_matrix(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Linear interpolation weights so that ``W @ values(src) == values(dst)``."""
    w = np.zeros((dst.size, src.size))
    eye = np.eye(src.size)
    for j in range(src.size):
        w[:, j] = np.interp(dst, src, eye[j])
    return w


def _centres(lo: float, hi: float, n: int) -> np.ndarray:
    return lo + (np.arange(n) + 0.5) * (hi - lo) / n


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def normalize(native: NativeSpectrogram, shape=(16, 32), config_name: str = "", label: int | None = None) -> SpectrogramSample:
    """Crop to the common scope, resample bilinearly to ``shape``, scale to [0, 1]."""
    h, w = shape
    checks = (
        ("range", native.range_extent, RANGE_SCOPE_M),
        ("Doppler", native.doppler_extent, SPEED_SCOPE_MPS),
        ("time", native.time_extent, (0.0, WINDOW_S)),
    )
    for what, (lo, hi), (want_lo, want_hi) in checks:
        if lo > want_lo + 1e-9 or hi < want_hi - 1e-9:
            raise CoverageError(f"native {what} extent [{lo}, {hi}] does not cover [{want_lo}, {want_hi}]")
    t_dst = _centres(0.0, WINDOW_S, w)
    wt = _interp_matrix(native.time_axis, t_dst)
    wr = _interp_matrix(native.range_axis, _centres(*RANGE_SCOPE_M, h))
    wd = _interp_matrix(native.doppler_axis, _centres(*SPEED_SCOPE_MPS, h))
    x_r = _minmax(wr @ native.x_r @ wt.T).astype(np.float32)
    x_d = _minmax(wd @ native.x_d @ wt.T).astype(np.float32)
    return SpectrogramSample(x_r=x_r, x_d=x_d, label=label, config_name=config_name)


def generate_sample(class_id: int, config: RadarConfigSpec, rng_seed: int, shape=(16, 32)) -> SpectrogramSample:
    native = render_native(class_id, config, rng_seed)
    return normalize(native, shape, config_name=config.name, label=class_id)


# --- datasets ------------------------------------------------------------


@dataclass(frozen=True)
class DomainDataset:
    """Immutable stack of samples from one configuration.

    ``labels`` holds -1 for every sample of an unlabelled dataset.
    """

    x_r: np.ndarray  # (n, H, W) float32
    x_d: np.ndarray
    labels: np.ndarray  # (n,) int64
    labeled: bool
    seed: int
    config_name: str
    k: int
    config: RadarConfigSpec | None = field(default=None, compare=False)

    def __post_init__(self):
        for arr in (self.x_r, self.x_d, self.labels):
            arr.flags.writeable = False
        if self.x_r.shape != self.x_d.shape or self.x_r.shape[0] != self.labels.shape[0]:
            raise ContractError("range, Doppler and label arrays disagree in length")
        if not self.labeled and (self.labels != -1).any():
            raise ContractError("unlabelled dataset carries labels")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, i: int) -> SpectrogramSample:
        lab = int(self.labels[i])
        return SpectrogramSample(self.x_r[i], self.x_d[i], lab if lab >= 0 else None, self.config_name)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.x_r.shape[1:])

    def strip_labels(self) -> "DomainDataset":
        return replace(self, labels=np.full_like(self.labels, -1), labeled=False)

    def with_labels(self, labels) -> "DomainDataset":
        return replace(self, labels=np.asarray(labels, dtype=np.int64).copy(), labeled=True)


_ROLE_TAGS = {"S_train": 1, "T_train": 2, "S_test": 3, "T_test": 4}


def balanced_labels(n: int, k: int, seed: int, role: str) -> np.ndarray:
    """Class-balanced label order for a dataset role; also recovers stripped labels."""
    rng = XorShift64Star(mix_seed(seed, _ROLE_TAGS[role], 0xC1A55))
    keys = rng.uniform(n)
    return (np.arange(n) % k)[np.argsort(keys, kind="stable")].astype(np.int64)


def make_dataset(config: RadarConfigSpec, n: int, k: int, seed: int, role: str, shape=(16, 32)) -> DomainDataset:
    if k > len(ACTIVITIES):
        raise ContractError(f"generator knows {len(ACTIVITIES)} activities, asked for k={k}")
    labels = balanced_labels(n, k, seed, role)
    h, w = shape
    xr = np.empty((n, h, w), dtype=np.float32)
    xd = np.empty((n, h, w), dtype=np.float32)
    for i, lab in enumerate(labels):
        s = generate_sample(int(lab), config, mix_seed(seed, _ROLE_TAGS[role], i), shape)
        xr[i], xd[i] = s.x_r, s.x_d
    return DomainDataset(xr, xd, labels, True, seed, config.name, k, config)


def make_domain_pair(cfg_s: RadarConfigSpec, cfg_t: RadarConfigSpec, n_train: int, n_test: int, k: int, seed: int, shape=(16, 32)):
    """``(S_train, T_train, S_test, T_test)``; T_train comes back unlabelled."""
    if n_train < k or n_test < k:
        raise ContractError(f"n_train and n_test must be >= k={k}")
    s_train = make_dataset(cfg_s, n_train, k, seed, "S_train", shape)
    t_train = make_dataset(cfg_t, n_train, k, seed, "T_train", shape).strip_labels()
    s_test = make_dataset(cfg_s, n_test, k, seed, "S_test", shape)
    t_test = make_dataset(cfg_t, n_test, k, seed, "T_test", shape)
    return s_train, t_train, s_test, t_test


# --- file format ---------------------------------------------------------
#
#   "MDDRAD01" | u32 k | u32 H | u32 W | u32 count | u8 labeled
#   u16 name length + utf-8 name | u64 seed
#   per sample: i32 label (-1 unlabelled), H*W f32 x_r, H*W f32 x_d
#   all little-endian.

_HEADER = struct.Struct("<IIIIB")


def dataset_bytes(ds: DomainDataset) -> bytes:
    n = len(ds)
    h, w = ds.shape
    name = ds.config_name.encode()
    parts = [DATASET_MAGIC, _HEADER.pack(ds.k, h, w, n, int(ds.labeled)), struct.pack("<H", len(name)), name]
    parts.append(struct.pack("<Q", ds.seed & _M64))
    rec = np.zeros(n, dtype=np.dtype([("label", "<i4"), ("x_r", "<f4", (h, w)), ("x_d", "<f4", (h, w))]))
    rec["label"] = ds.labels
    rec["x_r"] = ds.x_r
    rec["x_d"] = ds.x_d
    parts.append(rec.tobytes())
    return b"".join(parts)


def save_dataset(ds: DomainDataset, path) -> int:
    """Write ``ds``; returns the CRC-32 of the bytes written."""
    blob = dataset_bytes(ds)
    Path(path).write_bytes(blob)
    return zlib.crc32(blob)


def load_dataset(path) -> DomainDataset:
    blob = Path(path).read_bytes()
    if blob[:8] != DATASET_MAGIC:
        if blob[:6] == DATASET_MAGIC[:6]:
            raise DatasetFormatError(f"{path}: unsupported dataset version {blob[6:8]!r}")
        raise DatasetFormatError(f"{path}: not a dataset file (bad magic)")
    try:
        k, h, w, n, labeled = _HEADER.unpack_from(blob, 8)
        off = 8 + _HEADER.size
        (nlen,) = struct.unpack_from("<H", blob, off)
        name = blob[off + 2 : off + 2 + nlen].decode()
        off += 2 + nlen
        (seed,) = struct.unpack_from("<Q", blob, off)
        off += 8
    except (struct.error, UnicodeDecodeError) as exc:
        raise DatasetFormatError(f"{path}: truncated header") from exc
    dt = np.dtype([("label", "<i4"), ("x_r", "<f4", (h, w)), ("x_d", "<f4", (h, w))])
    if len(blob) - off != n * dt.itemsize:
        raise DatasetFormatError(f"{path}: expected {n} samples ({n * dt.itemsize} bytes), found {len(blob) - off} bytes")
    rec = np.frombuffer(blob, dtype=dt, count=n, offset=off)
    labels = rec["label"].astype(np.int64)
    if labeled and ((labels < 0) | (labels >= k)).any():
        raise DatasetFormatError(f"{path}: label out of range for k={k}")
    return DomainDataset(
        x_r=rec["x_r"].astype(np.float32),
        x_d=rec["x_d"].astype(np.float32),
        labels=labels,
        labeled=bool(labeled),
        seed=seed,
        config_name=name,
        k=k,
        config=PRESETS.get(name),
    )
