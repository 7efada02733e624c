"""Small encoder-decoder segmentation network and prediction fusion."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from cinelab.autodiff import ShapeError, Tape, Tensor, constant
from cinelab.rng import stream


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class SegNetConfig:
    height: int = 96
    width: int = 96
    channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    seed: int = 0
    zero_head: bool = True
    # fixed input affine map (x - input_shift) * input_scale
    input_shift: float = 0.5
    input_scale: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        stages = len(self.channels) - 1
        if stages < 1:
            raise ValueError("SegNetConfig.channels needs at least two stages")
        if self.height % 2**stages or self.width % 2**stages:
            raise ValueError(
                f"input {self.height}x{self.width} must be divisible by {2 ** stages} "
                f"for {stages} downsampling stages"
            )

    @property
    def down_stages(self) -> int:
        return len(self.channels) - 1

    @classmethod
    def from_dict(cls, d: dict) -> "SegNetConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def _layer_shapes(cfg: SegNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    k, ch = cfg.kernel, cfg.channels
    shapes = [("enc0.w", (ch[0], 1, k, k)), ("enc0.b", (ch[0],))]
    for i in range(1, len(ch)):
        shapes += [(f"enc{i}.w", (ch[i], ch[i - 1], k, k)), (f"enc{i}.b", (ch[i],))]
    for i in range(len(ch) - 1, 0, -1):
        shapes += [(f"dec{i}.w", (ch[i - 1], ch[i], k, k)), (f"dec{i}.b", (ch[i - 1],))]
    shapes += [("head.w", (1, ch[0], 1, 1)), ("head.b", (1,))]
    return shapes


@dataclass
class SegNet:
    """Parameters of the network, in declaration order.

    Encoder: a stride-1 conv then one stride-2 conv per further stage.
    Decoder: nearest 2x upsample, conv, and an additive skip from the
    encoder stage of matching resolution.  A 1x1 head and sigmoid give the
    per-pixel probability.
    """

    config: SegNetConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: SegNetConfig | None = None) -> "SegNet":
        config = config or SegNetConfig()
        rng = stream(config.seed, 0x5E6)
        params = {}
        for name, shape in _layer_shapes(config):
            if name.endswith(".b"):
                params[name] = np.zeros(shape)
            elif name == "head.w" and config.zero_head:
                params[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        return cls(config, params)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "SegNet":
        return SegNet(self.config, {k: v.copy() for k, v in self.params.items()})

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        """Watch every parameter on ``tape`` once; share the result between branches."""
        return {k: tape.watch(v) for k, v in self.params.items()}


@dataclass(frozen=True)
class FusionParams:
    tau: float = 0.2
    gamma_w: float = 0.5
    gamma_s: float = 0.5

    def __post_init__(self):
        for name in ("tau", "gamma_w", "gamma_s"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"FusionParams.{name}={v} outside [0, 1]")
        if abs(self.gamma_w + self.gamma_s - 1.0) > 1e-12:
            raise ValueError(f"gamma_w + gamma_s must equal 1, got {self.gamma_w + self.gamma_s}")


@dataclass
class PredictionMap:
    tensor: Tensor
    provenance: str

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values


def _as_batch(image) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[:, None]
    return x


def forward_seg(
    net: SegNet,
    image,
    tape: Tape | None = None,
    bound: dict[str, Tensor] | None = None,
    provenance: str = "weak",
) -> PredictionMap:
    """Per-pixel probabilities for ``image`` (H,W), (N,H,W) or (N,1,H,W).

    The output keeps the batch layout (N,1,H,W).
    """
    tape = tape or Tape()
    p = bound if bound is not None else net.bind(tape)
    cfg = net.config
    x = _as_batch(image.values if isinstance(image, Tensor) else image)
    if x.shape[1:] != (1, cfg.height, cfg.width):
        raise ShapeError("forward_seg", x.shape, (1, cfg.height, cfg.width))
    h = constant((x - cfg.input_shift) * cfg.input_scale)

    skips = []
    for i in range(len(cfg.channels)):
        stride = 1 if i == 0 else 2
        h = tape.relu(tape.bias_add(tape.conv2d(h, p[f"enc{i}.w"], stride), p[f"enc{i}.b"]))
        skips.append(h)
    for i in range(len(cfg.channels) - 1, 0, -1):
        h = tape.upsample_nearest_2x(h)
        h = tape.bias_add(tape.conv2d(h, p[f"dec{i}.w"]), p[f"dec{i}.b"])
        h = tape.relu(tape.add(h, skips[i - 1]))
    out = tape.sigmoid(tape.bias_add(tape.conv2d(h, p["head.w"]), p["head.b"]))
    return PredictionMap(out, provenance)


def dual_forward(net: SegNet, x_weak, x_strong, tape: Tape, bound: dict[str, Tensor] | None = None):
    """Run both branches through one shared parameter set on one tape."""
    bound = bound if bound is not None else net.bind(tape)
    pw = forward_seg(net, x_weak, tape, bound, "weak")
    ps = forward_seg(net, x_strong, tape, bound, "strong")
    return pw, ps


def fuse(pw: PredictionMap, ps: PredictionMap, fp: FusionParams, tape: Tape | None = None) -> PredictionMap:
    """gamma_w * pw * [pw > tau] + gamma_s * ps.

    The indicator is a constant during backprop: gradient reaches the
    retained weak pixels and every strong pixel.
    """
    if pw.values.shape != ps.values.shape:
        raise ShapeError("fuse", pw.values.shape, ps.values.shape)
    tape = tape or Tape()
    keep = constant((pw.values > fp.tau).astype(np.float64))
    weak = tape.scalar_mul(tape.elementwise_mul(pw.tensor, keep), fp.gamma_w)
    strong = tape.scalar_mul(ps.tensor, fp.gamma_s)
    return PredictionMap(tape.add(weak, strong), "fused")


def core_score(y_hat, region) -> float:
    values = y_hat.values if isinstance(y_hat, (PredictionMap, Tensor)) else np.asarray(y_hat)
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(region.mask if hasattr(region, "mask") else region, dtype=bool)
    values = values.reshape(mask.shape) if values.size == mask.size else values
    if values.shape != mask.shape:
        raise ShapeError("core_score", values.shape, mask.shape)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("core_score: empty region")
    return float(values[mask].sum() / n)


# -- checkpoint files ----------------------------------------------------

_MAGIC = b"SEGN"
_VERSION = 1


def save_checkpoint(net: SegNet, path, extra: dict | None = None) -> Path:
    """Header (magic, version, length-prefixed JSON config) + float64 params."""
    path = Path(path)
    meta = {"segnet": net.config.to_dict(), "params": [[k, list(v.shape)] for k, v in net.params.items()]}
    if extra:
        meta["extra"] = extra
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for v in net.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return path


def load_checkpoint(path, expect: SegNetConfig | None = None) -> tuple[SegNet, dict]:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header at offset {len(data)}")
    if data[:4] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r} at offset 0")
    version, n = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at offset 4")
    if 12 + n > len(data):
        raise CheckpointError(f"{path}: truncated config at offset 12")
    meta = json.loads(data[12 : 12 + n])
    cfg = SegNetConfig.from_dict(meta["segnet"])
    if expect is not None and cfg != expect:
        raise CheckpointError(f"{path}: config mismatch, file has {cfg}, expected {expect}")
    offset = 12 + n
    params = {}
    for name, shape in meta["params"]:
        size = int(np.prod(shape)) * 8
        if offset + size > len(data):
            raise CheckpointError(f"{path}: truncated parameter {name} at offset {offset}")
        params[name] = np.frombuffer(data, "<f8", count=size // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += size
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes at offset {offset}")
    expected_names = [n for n, _ in _layer_shapes(cfg)]
    if list(params) != expected_names:
        raise CheckpointError(f"{path}: parameter layout does not match config")
    return SegNet(cfg, params), meta.get("extra", {})
