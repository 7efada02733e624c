"""Weak and strong views of a cineloop.

The weak view is the first frame under a random integer translation.  The
strong view averages the remaining frames, then applies a fixed chain:
translation, brightness, multiplicative speckle, salt-and-pepper, line cuts,
pixel cuts and a final clamp.  Masks follow only the geometric step.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from cinelab.rng import stream

MODES = ("none", "translate", "weak_strong", "cine")


@dataclass(frozen=True)
class AugmentConfig:
    translate_max: float = 0.10
    brightness_delta: float = 0.2
    speckle_sigma: float = 0.15
    salt_pepper_rate: float = 0.01
    line_cuts: int = 4
    pixel_cut_rate: float = 0.005
    share_translation: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("translate_max", "brightness_delta", "salt_pepper_rate", "pixel_cut_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"AugmentConfig.{name}={v}: must be in [0, 1]")
        if self.speckle_sigma < 0:
            raise ValueError(f"AugmentConfig.speckle_sigma={self.speckle_sigma}: must be >= 0")
        if self.line_cuts < 0:
            raise ValueError(f"AugmentConfig.line_cuts={self.line_cuts}: must be >= 0")

    @classmethod
    def identity(cls, **kw) -> "AugmentConfig":
        base = dict(translate_max=0.0, brightness_delta=0.0, speckle_sigma=0.0,
                    salt_pepper_rate=0.0, line_cuts=0, pixel_cut_rate=0.0)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"AugmentConfig: unknown field(s) {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AugmentedPair:
    x_weak: np.ndarray
    x_strong: np.ndarray
    needle_w: np.ndarray
    prostate_w: np.ndarray
    needle_s: np.ndarray
    prostate_s: np.ndarray
    log: list[dict] = field(default_factory=list)

    @property
    def region_w(self) -> np.ndarray:
        return self.needle_w & self.prostate_w


def temporal_average(frames) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise ValueError(f"temporal_average needs a non-empty (T,H,W) stack, got {frames.shape}")
    return np.clip(frames.mean(axis=0), 0.0, 1.0)


def translate(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift content by (dy, dx) pixels; vacated pixels are zero / False."""
    out = np.zeros_like(a)
    h, w = a.shape
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[dst_y, dst_x] = a[src_y, src_x]
    return out


def draw_shift(shape, translate_max: float, rng) -> tuple[int, int]:
    my = int(np.floor(translate_max * shape[0]))
    mx = int(np.floor(translate_max * shape[1]))
    if min(my, mx) < 1:
        return 0, 0
    return int(rng.integers(-my, my + 1)), int(rng.integers(-mx, mx + 1))


def weak_augment(frame0, needle, prostate, config: AugmentConfig, rng, shift=None):
    """Translate the first frame and its masks; returns (image, needle, prostate, log)."""
    img = np.asarray(frame0, dtype=np.float64)
    dy, dx = shift if shift is not None else draw_shift(img.shape, config.translate_max, rng)
    log = [{"op": "translate", "branch": "weak", "dy": dy, "dx": dx}]
    if dy == 0 and dx == 0:
        return img.copy(), needle.copy(), prostate.copy(), log
    return translate(img, dy, dx), translate(needle, dy, dx), translate(prostate, dy, dx), log


def strong_augment(avg_frame, needle, prostate, config: AugmentConfig, rng, shift=None):
    """Heavy corruption of the averaged frame; returns (image, needle, prostate, log)."""
    img = np.asarray(avg_frame, dtype=np.float64)
    h, w = img.shape
    r_shift, r_bright, r_speckle, r_sp, r_lines, r_pix = rng.spawn(6)
    log = []

    dy, dx = shift if shift is not None else draw_shift(img.shape, config.translate_max, r_shift)
    log.append({"op": "translate", "branch": "strong", "dy": dy, "dx": dx})
    if dy or dx:
        img, needle, prostate = translate(img, dy, dx), translate(needle, dy, dx), translate(prostate, dy, dx)
    else:
        img, needle, prostate = img.copy(), needle.copy(), prostate.copy()

    u = 1.0 + config.brightness_delta * (2.0 * r_bright.random() - 1.0)
    img = img * u
    log.append({"op": "brightness", "factor": u})

    if config.speckle_sigma > 0:
        img = img * (1.0 + r_speckle.normal(0.0, config.speckle_sigma, size=img.shape))
    log.append({"op": "speckle", "sigma": config.speckle_sigma})

    if config.salt_pepper_rate > 0:
        r = r_sp.random(img.shape)
        half = config.salt_pepper_rate / 2
        pepper = r < half
        salt = (r >= half) & (r < config.salt_pepper_rate)
        img = np.where(pepper, 0.0, np.where(salt, 1.0, img))
        log.append({"op": "salt_pepper", "salt": int(salt.sum()), "pepper": int(pepper.sum())})

    rows, cols = [], []
    if config.line_cuts > 0:
        for _ in range(int(r_lines.integers(0, config.line_cuts + 1))):
            if r_lines.random() < 0.5:
                rows.append(int(r_lines.integers(h)))
            else:
                cols.append(int(r_lines.integers(w)))
        img[rows, :] = 0.0
        img[:, cols] = 0.0
    log.append({"op": "line_cuts", "rows": rows, "cols": cols})

    if config.pixel_cut_rate > 0:
        cut = r_pix.random(img.shape) < config.pixel_cut_rate
        img = np.where(cut, 0.0, img)
        log.append({"op": "pixel_cuts", "count": int(cut.sum())})

    return np.clip(img, 0.0, 1.0), needle, prostate, log


def make_pair(loop, mode: str, config: AugmentConfig, key: tuple[int, ...], avg_frame=None) -> AugmentedPair:
    """Build the training views of one cineloop for an augmentation mode.

    ``none``: frame 0 for both views.  ``translate``: translated frame 0.
    ``weak_strong``: translated frame 0 and strong-augmented frame 0.
    ``cine``: translated frame 0 and strong-augmented mean of frames 1..T-1.
    ``key`` seeds the per-call random streams.
    """
    if mode not in MODES:
        raise ValueError(f"unknown augmentation mode {mode!r}; expected one of {MODES}")
    frame0 = np.asarray(loop.frames[0], dtype=np.float64)
    needle, prostate = loop.needle, loop.prostate
    if mode == "none":
        return AugmentedPair(frame0, frame0, needle.copy(), prostate.copy(), needle.copy(), prostate.copy(),
                             [{"op": "none"}])
    rng = stream(config.seed, *key)
    r_weak, r_strong = rng.spawn(2)
    shift_w = draw_shift(frame0.shape, config.translate_max, r_weak)
    xw, nw, pw, log = weak_augment(frame0, needle, prostate, config, r_weak, shift=shift_w)
    if mode == "translate":
        return AugmentedPair(xw, xw, nw, pw, nw, pw, log)
    if mode == "cine":
        base = avg_frame if avg_frame is not None else temporal_average(loop.frames[1:])
    else:
        base = frame0
    xs, ns, ps, slog = strong_augment(base, needle, prostate, config, r_strong,
                                      shift=shift_w if config.share_translation else None)
    return AugmentedPair(xw, xs, nw, pw, ns, ps, log + slog)
