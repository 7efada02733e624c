"""Synthetic prostate-ultrasound cineloops with weak, involvement-style labels.

Each core is a quasi-static cineloop: one tissue echogenicity map, a
prostate ellipse, an oblique needle corridor and (for cancer cores) a few
lesion blobs whose speckle is darker (hypoechoic) and heavier-tailed than
the surrounding gland.  RF lines are simulated by convolving scatterers with a
Gaussian-windowed pulse along depth, then converted to B-mode by envelope
detection and log compression.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy.ndimage import convolve1d, gaussian_filter, uniform_filter1d

from cinelab.rng import stream

GRADES = ("GS7", "GS8", "GS9", "GS10")
# cancer-core counts per Gleason bucket over both centers
GRADE_COUNTS = {"GS7": 286, "GS8": 87, "GS9": 56, "GS10": 12}
DEFAULT_GRADE_MIX = {g: n / 441 for g, n in GRADE_COUNTS.items()}

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_SQRT2 = math.sqrt(2.0) - 1.0

# stream ids
_S_OFFSETS, _S_PATIENT, _S_GEOMETRY, _S_FRAMES = 1, 2, 3, 4


class PhantomError(RuntimeError):
    pass


@dataclass
class PhantomConfig:
    height: int = 96
    width: int = 96
    frames: int = 16
    n_patients: int = 20
    cores_per_patient: int = 10
    benign_fraction: float = 0.80
    grade_mix: dict = field(default_factory=lambda: dict(DEFAULT_GRADE_MIX))
    center_a_fraction: float = 131 / 311
    min_involvement: float = 0.05
    # tissue and lesion appearance
    gland_echo: float = 0.30
    background_echo: float = 0.18
    lesion_contrast: float = 0.8  # < 1: hypoechoic
    lesion_sparsity: float = 0.5
    texture_sigma: float = 6.0
    texture_strength: float = 0.15
    # RF / speckle
    pulse_wavelength: float = 3.5
    pulse_sigma: float = 1.2
    lateral_sigma: float = 0.8
    frame_correlation: float = 0.2
    jitter: int = 1
    center_gain: dict = field(default_factory=lambda: {"A": 1.0, "B": 0.95})
    rms_window: int = 7
    log_alpha: float = 100.0
    seed: int = 0

    def validate(self) -> "PhantomConfig":
        def need(ok, name, constraint):
            if not ok:
                raise ValueError(f"PhantomConfig.{name}={getattr(self, name)!r}: must be {constraint}")

        need(self.height >= 16, "height", ">= 16")
        need(self.width >= 16, "width", ">= 16")
        need(2 <= self.frames <= 200, "frames", "in [2, 200]")
        need(self.n_patients >= 1, "n_patients", ">= 1")
        need(self.cores_per_patient >= 1, "cores_per_patient", ">= 1")
        need(0.0 < self.benign_fraction <= 1.0, "benign_fraction", "in (0, 1]")
        need(set(self.grade_mix) == set(GRADES), "grade_mix", f"keyed by {GRADES}")
        need(all(v >= 0 for v in self.grade_mix.values()), "grade_mix", "non-negative")
        need(abs(sum(self.grade_mix.values()) - 1.0) < 1e-9, "grade_mix", "summing to 1")
        need(0.0 <= self.center_a_fraction <= 1.0, "center_a_fraction", "in [0, 1]")
        need(0.0 < self.min_involvement <= 1.0, "min_involvement", "in (0, 1]")
        need(self.lesion_contrast > 0, "lesion_contrast", "> 0")
        need(0.0 < self.lesion_sparsity <= 1.0, "lesion_sparsity", "in (0, 1]")
        need(0.0 <= self.frame_correlation < 1.0, "frame_correlation", "in [0, 1)")
        need(self.jitter in (0, 1), "jitter", "0 or 1")
        need(set(self.center_gain) == {"A", "B"}, "center_gain", "keyed by A and B")
        need(self.rms_window >= 1, "rms_window", ">= 1")
        need(self.log_alpha > 0, "log_alpha", "> 0")
        need(self.seed >= 0, "seed", ">= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"PhantomConfig: unknown field(s) {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CoreRecord:
    patient_id: int
    center: str
    core_id: int
    label: str
    involvement: float
    grade_bucket: str
    path: str = ""

    @property
    def positive(self) -> bool:
        return self.involvement > 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Cineloop:
    frames: np.ndarray  # (T, H, W) float32 in [0, 1]
    needle: np.ndarray  # (H, W) bool
    prostate: np.ndarray
    lesion: np.ndarray

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[0] < 2:
            raise ValueError(f"cineloop needs (T>=2, H, W) frames, got {self.frames.shape}")
        for m in (self.needle, self.prostate, self.lesion):
            if m.shape != self.frames.shape[1:]:
                raise ValueError(f"mask shape {m.shape} != frame shape {self.frames.shape[1:]}")

    @property
    def region(self) -> np.ndarray:
        return self.needle & self.prostate


# -- signal chain --------------------------------------------------------


def envelope(rf: np.ndarray, window: int = 7) -> np.ndarray:
    """Moving RMS along depth (axis 0) of the rectified RF signal."""
    rf = np.asarray(rf, dtype=np.float64)
    power = uniform_filter1d(rf * rf, size=window, axis=0, mode="reflect")
    return np.sqrt(np.maximum(power, 0.0))


def log_compress(env: np.ndarray, alpha: float = 100.0) -> np.ndarray:
    return np.clip(np.log1p(alpha * env) / np.log1p(alpha), 0.0, 1.0)


def rf_to_bmode(rf_frame: np.ndarray, window: int = 7, alpha: float = 100.0) -> np.ndarray:
    return log_compress(envelope(rf_frame, window), alpha)


def _pulse(wavelength: float, sigma: float) -> np.ndarray:
    """Gaussian-windowed cosine with unit energy (``wavelength=inf``: plain Gaussian)."""
    half = int(math.ceil(3 * sigma))
    t = np.arange(-half, half + 1, dtype=np.float64)
    p = np.exp(-0.5 * (t / sigma) ** 2) * np.cos(2 * np.pi * t / wavelength)
    return p / np.sqrt(np.sum(p * p))


# -- geometry ------------------------------------------------------------


def compute_involvement(lesion, needle, prostate) -> float:
    """|lesion ∩ N ∩ P| / |N ∩ P| computed exactly, returned as float."""
    lesion, needle, prostate = (np.asarray(m, dtype=bool) for m in (lesion, needle, prostate))
    if not (lesion.shape == needle.shape == prostate.shape):
        raise ValueError(f"mask shapes differ: {lesion.shape}, {needle.shape}, {prostate.shape}")
    region = needle & prostate
    n = int(region.sum())
    if n == 0:
        raise ValueError("needle and prostate masks do not intersect")
    return float(Fraction(int((lesion & region).sum()), n))


def _ellipse(h, w, cy, cx, a, b, theta=0.0):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _prostate(cfg: PhantomConfig, rng):
    h, w = cfg.height, cfg.width
    frac = rng.uniform(0.32, 0.58)
    ratio = rng.uniform(0.8, 1.0)
    ab = frac * h * w / math.pi
    a = math.sqrt(ab / ratio)  # horizontal semi-axis
    b = ratio * a
    cy = h / 2 + rng.uniform(-2, 2)
    cx = w / 2 + rng.uniform(-2, 2)
    return _ellipse(h, w, cy, cx, a, b)


def _needle(cfg: PhantomConfig, prostate, rng):
    h, w = cfg.height, cfg.width
    ys, xs = np.nonzero(prostate)
    i = rng.integers(len(ys))
    # anchor point near the gland centre so the corridor crosses it
    py = 0.5 * ys[i] + 0.5 * ys.mean()
    px = 0.5 * xs[i] + 0.5 * xs.mean()
    angle = math.radians(rng.uniform(15.0, 45.0)) * (1 if rng.random() < 0.5 else -1)
    width = rng.uniform(2.0, 4.0)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dist = np.abs(-(xx - px) * math.sin(angle) + (yy - py) * math.cos(angle))
    return dist <= width / 2


def _lesions(cfg: PhantomConfig, region, rng):
    h, w = cfg.height, cfg.width
    ys, xs = np.nonzero(region)
    lesion = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        i = rng.integers(len(ys))
        a = rng.uniform(3.0, 14.0)
        b = a * rng.uniform(0.6, 1.0)
        lesion |= _ellipse(h, w, ys[i], xs[i], a, b, rng.uniform(0, math.pi))
    return lesion


# -- core generation -----------------------------------------------------


def _frac(x: float) -> float:
    return x - math.floor(x)


def core_label(cfg: PhantomConfig, patient_id: int, core_index: int) -> tuple[str, str]:
    """(label, grade bucket) from a seeded two-dimensional Weyl sequence.

    The sequence index is the global core index, so benign and grade
    proportions track the configured mix closely even over a few hundred
    cores, while each core's draw stays a pure function of its indices.
    """
    off = stream(cfg.seed, _S_OFFSETS).random(2)
    g = patient_id * cfg.cores_per_patient + core_index
    u = _frac(off[0] + g * _GOLDEN)
    if u < cfg.benign_fraction:
        return "benign", "Benign"
    v = _frac(off[1] + g * _SQRT2)
    acc = 0.0
    for grade in GRADES:
        acc += cfg.grade_mix[grade]
        if v < acc:
            return "cancer", grade
    return "cancer", GRADES[-1]


def patient_center(cfg: PhantomConfig, patient_id: int) -> str:
    return "A" if stream(cfg.seed, _S_PATIENT, patient_id).random() < cfg.center_a_fraction else "B"


def generate_core(cfg: PhantomConfig, patient_id: int, core_index: int) -> tuple[Cineloop, CoreRecord]:
    """Generate one core; a pure function of ``(cfg, patient_id, core_index)``."""
    h, w = cfg.height, cfg.width
    label, grade = core_label(cfg, patient_id, core_index)
    center = patient_center(cfg, patient_id)
    core_id = patient_id * cfg.cores_per_patient + core_index
    rng = stream(cfg.seed, _S_GEOMETRY, patient_id, core_index)

    for _attempt in range(100):
        prostate = _prostate(cfg, rng)
        cover = prostate.mean()
        if not 0.30 <= cover <= 0.60:
            continue
        needle = _needle(cfg, prostate, rng)
        region = needle & prostate
        if region.sum() < 20:
            continue
        if label == "benign":
            lesion = np.zeros((h, w), dtype=bool)
            break
        lesion = _lesions(cfg, region, rng)
        if compute_involvement(lesion, needle, prostate) >= cfg.min_involvement:
            break
    else:
        raise PhantomError(f"patient {patient_id} core {core_index}: no valid geometry after 100 attempts")

    frames = render_frames(cfg, prostate, lesion, center, stream(cfg.seed, _S_FRAMES, patient_id, core_index))
    loop = Cineloop(frames, needle, prostate, lesion)
    rec = CoreRecord(
        patient_id=patient_id,
        center=center,
        core_id=core_id,
        label=label,
        involvement=compute_involvement(lesion, needle, prostate),
        grade_bucket=grade,
        path=f"cores/p{patient_id:04d}_c{core_id:06d}.usc",
    )
    return loop, rec


def render_frames(cfg: PhantomConfig, prostate, lesion, center: str, rng) -> np.ndarray:
    """Simulate ``cfg.frames`` B-mode frames of a quasi-static scene."""
    h, w, t = cfg.height, cfg.width, cfg.frames
    pad = cfg.jitter
    hp, wp = h + 2 * pad, w + 2 * pad

    def padded(m):
        return np.pad(m, pad, mode="edge") if pad else m

    texture = gaussian_filter(rng.standard_normal((hp, wp)), cfg.texture_sigma, mode="reflect")
    texture /= max(texture.std(), 1e-12)
    echo = np.where(padded(prostate), cfg.gland_echo, cfg.background_echo)
    echo = echo * (1.0 + cfg.texture_strength * np.tanh(texture))
    les = padded(lesion)
    echo = np.where(les, echo * cfg.lesion_contrast, echo) * cfg.center_gain[center]
    # sparse scatterers inside lesions: same mean power, heavier-tailed speckle
    sparse = rng.random((hp, wp)) < cfg.lesion_sparsity
    density = np.where(les, sparse / math.sqrt(cfg.lesion_sparsity), 1.0)

    pulse = _pulse(cfg.pulse_wavelength, cfg.pulse_sigma)
    lateral = _pulse(np.inf, cfg.lateral_sigma) if cfg.lateral_sigma > 0 else None
    rho = cfg.frame_correlation
    scat = rng.standard_normal((hp, wp))
    out = np.empty((t, h, w), dtype=np.float32)
    for k in range(t):
        if k:
            scat = rho * scat + math.sqrt(1 - rho * rho) * rng.standard_normal((hp, wp))
        rf = convolve1d(scat * density, pulse, axis=0, mode="constant")
        if cfg.lateral_sigma > 0:
            rf = convolve1d(rf, lateral, axis=1, mode="constant")
        rf = rf * echo
        dy, dx = (0, 0) if k == 0 or not pad else tuple(rng.integers(-pad, pad + 1, size=2))
        rf = rf[pad + dy : pad + dy + h, pad + dx : pad + dx + w]
        out[k] = rf_to_bmode(rf, cfg.rms_window, cfg.log_alpha)
    return out


def generate_dataset(cfg: PhantomConfig):
    """Yield ``(Cineloop, CoreRecord)`` for every core of every patient."""
    cfg.validate()
    for pid in range(cfg.n_patients):
        for ci in range(cfg.cores_per_patient):
            yield generate_core(cfg, pid, ci)
