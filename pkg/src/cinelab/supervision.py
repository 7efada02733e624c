"""Region construction, weak-label losses and the training loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from cinelab.augment import MODES, AugmentConfig, make_pair, temporal_average
from cinelab.autodiff import Tape, Tensor, constant
from cinelab.metrics import auroc
from cinelab.model import FusionParams, PredictionMap, SegNet, SegNetConfig, core_score, dual_forward, forward_seg, fuse
from cinelab.rng import stream

log = logging.getLogger(__name__)

LOSSES = ("imse", "maskce")
IMSE_FORMS = ("pixel", "literal", "mean")
CE_EPS = 1e-7


class TrainingError(RuntimeError):
    pass


@dataclass
class RegionR:
    mask: np.ndarray

    @property
    def pixel_count(self) -> int:
        return int(self.mask.sum())


def region_mask(needle, prostate) -> RegionR:
    needle, prostate = np.asarray(needle, dtype=bool), np.asarray(prostate, dtype=bool)
    if needle.shape != prostate.shape:
        raise ValueError(f"needle {needle.shape} and prostate {prostate.shape} masks differ in shape")
    mask = needle & prostate
    if not mask.any():
        raise ValueError("needle and prostate masks do not intersect")
    return RegionR(mask)


# -- losses ----------------------------------------------------------------


def _layout(y_hat: Tensor, region):
    """Broadcast region(s) and detect whether ``y_hat`` carries a batch axis."""
    mask = np.asarray(region.mask if isinstance(region, RegionR) else region, dtype=bool)
    batched = y_hat.values.ndim == 4
    if batched:
        n = y_hat.shape[0]
        mask = mask.reshape(n, 1, *mask.shape[-2:]) if mask.ndim >= 3 else np.broadcast_to(mask, y_hat.shape)
    if mask.shape != y_hat.shape:
        raise ValueError(f"region shape {mask.shape} does not match prediction shape {y_hat.shape}")
    if not all(m.any() for m in (mask if batched else [mask])):
        raise ValueError("empty region")
    return np.ascontiguousarray(mask), batched


def _per_sample(values, batched, shape):
    """Per-sample scalars broadcast to the prediction layout."""
    v = np.asarray(values, dtype=np.float64)
    if batched:
        v = np.broadcast_to(v.reshape(-1), (shape[0],)).reshape(-1, 1, 1, 1)
    return np.broadcast_to(v, shape).copy()


def _reduce(tape: Tape, t: Tensor, mask, batched) -> Tensor:
    """Masked mean per sample, then the plain mean over the batch."""
    if not batched:
        return tape.masked_mean(t, mask)
    per = tape.masked_mean(t, mask, per_sample=True)
    return tape.masked_mean(per, np.ones(per.shape, dtype=bool))


def loss_imse(tape: Tape, y_hat: Tensor, region, inv, form: str = "pixel") -> Tensor:
    """Involvement-aware squared error over the needle-prostate region.

    ``pixel`` (default): mean over R of (y - inv)^2.
    ``literal``: sum over all pixels of (y * 1_R - inv)^2, divided by |R|;
    differs from ``pixel`` by a parameter-independent constant.
    ``mean``: (mean_R(y) - inv)^2.
    """
    inv_arr = np.asarray(inv, dtype=np.float64)
    if np.any(inv_arr < 0) or np.any(inv_arr > 1) or not np.all(np.isfinite(inv_arr)):
        raise ValueError(f"involvement {inv} outside [0, 1]")
    if form not in IMSE_FORMS:
        raise ValueError(f"unknown iMSE form {form!r}")
    mask, batched = _layout(y_hat, region)
    target = constant(-_per_sample(inv_arr, batched, y_hat.shape))

    if form == "pixel":
        d = tape.add(y_hat, target)
        return _reduce(tape, tape.elementwise_mul(d, d), mask, batched)
    if form == "literal":
        d = tape.add(tape.elementwise_mul(y_hat, constant(mask.astype(np.float64))), target)
        sq = tape.elementwise_mul(d, d)
        full = np.ones(mask.shape, dtype=bool)
        if not batched:
            return tape.scalar_mul(tape.masked_mean(sq, full), mask.size / mask.sum())
        per = tape.masked_mean(sq, full, per_sample=True)
        counts = mask.reshape(mask.shape[0], -1).sum(axis=1)
        per = tape.elementwise_mul(per, constant(mask[0].size / counts))
        return tape.masked_mean(per, np.ones(per.shape, dtype=bool))
    # form == "mean"
    if not batched:
        m = tape.masked_mean(y_hat, mask)
        d = tape.add(m, constant(-inv_arr.reshape(())))
        return tape.elementwise_mul(d, d)
    m = tape.masked_mean(y_hat, mask, per_sample=True)
    d = tape.add(m, constant(-np.broadcast_to(inv_arr.reshape(-1), m.shape)))
    sq = tape.elementwise_mul(d, d)
    return tape.masked_mean(sq, np.ones(sq.shape, dtype=bool))


def loss_maskce(tape: Tape, y_hat: Tensor, region, label) -> Tensor:
    """Binary cross-entropy of the core label, averaged over R (predictions clamped)."""
    y = np.asarray(label, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"label {label} must be 0 or 1")
    mask, batched = _layout(y_hat, region)
    yy = _per_sample(y, batched, y_hat.shape)
    p = tape.clip(y_hat, CE_EPS, 1.0 - CE_EPS)
    log_p = tape.log(p)
    log_q = tape.log(tape.add(tape.scalar_mul(p, -1.0), constant(np.ones(p.shape))))
    ll = tape.add(tape.elementwise_mul(log_p, constant(yy)), tape.elementwise_mul(log_q, constant(1.0 - yy)))
    return tape.scalar_mul(_reduce(tape, ll, mask, batched), -1.0)


# -- optimizer ---------------------------------------------------------------


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- configuration -------------------------------------------------------------


@dataclass
class TrainConfig:
    loss: str = "imse"
    mode: str = "cine"
    tau: float = 0.2
    gamma_w: float = 0.5
    gamma_s: float = 0.5
    imse_form: str = "pixel"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 4
    epochs: int = 30
    folds: int = 5
    seed: int = 0
    channels: tuple[int, ...] = (8, 16, 32)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.channels = tuple(self.channels)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig.from_dict(self.augment)
        self.validate()

    def validate(self) -> None:
        def need(ok, name, constraint):
            if not ok:
                raise ValueError(f"TrainConfig.{name}={getattr(self, name)!r}: must be {constraint}")

        need(self.loss in LOSSES, "loss", f"one of {LOSSES}")
        need(self.mode in MODES, "mode", f"one of {MODES}")
        need(self.imse_form in IMSE_FORMS, "imse_form", f"one of {IMSE_FORMS}")
        need(isinstance(self.epochs, int) and self.epochs >= 1, "epochs", "an integer >= 1")
        need(isinstance(self.batch_size, int) and self.batch_size >= 1, "batch_size", "an integer >= 1")
        need(isinstance(self.folds, int) and self.folds >= 2, "folds", "an integer >= 2")
        need(self.lr >= 0 and math.isfinite(self.lr), "lr", "finite and >= 0")
        need(len(self.betas) == 2 and all(0 <= b < 1 for b in self.betas), "betas", "two values in [0, 1)")
        need(self.seed >= 0, "seed", ">= 0")
        self.fusion  # FusionParams validates tau / gammas

    @property
    def fusion(self) -> FusionParams:
        return FusionParams(self.tau, self.gamma_w, self.gamma_s)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"TrainConfig: unknown field(s) {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["channels"] = list(self.channels)
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auroc: float | None
    wall_clock: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    checkpoint: str | None = None

    @property
    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def to_dict(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs], "best_epoch": self.best_epoch,
                "checkpoint": self.checkpoint}


# -- inference -----------------------------------------------------------------


def predict(net: SegNet, loops, mode: str, fusion: FusionParams, averages=None) -> np.ndarray:
    """Unaugmented prediction maps (N,H,W) for a list of cineloops.

    Branches mirror training: ``cine`` fuses frame 0 with the mean of the
    remaining frames, ``weak_strong`` fuses frame 0 with itself, the other
    modes use frame 0 alone.
    """
    bound = {k: constant(v) for k, v in net.params.items()}
    tape = Tape()
    x0 = np.stack([np.asarray(lp.frames[0], dtype=np.float64) for lp in loops])
    pw = forward_seg(net, x0, tape, bound, "weak")
    if mode in ("none", "translate"):
        return pw.values[:, 0]
    if mode == "cine":
        if averages is None:
            averages = [temporal_average(lp.frames[1:]) for lp in loops]
        ps = forward_seg(net, np.stack(averages), tape, bound, "strong")
    else:
        ps = PredictionMap(pw.tensor, "strong")
    return fuse(pw, ps, fusion, tape).values[:, 0]


def score_cores(net, loops, mode, fusion, averages=None, chunk: int = 16) -> list[float]:
    scores = []
    for i in range(0, len(loops), chunk):
        part = loops[i : i + chunk]
        avg = averages[i : i + chunk] if averages is not None else None
        maps = predict(net, part, mode, fusion, avg)
        scores += [core_score(m, lp.needle & lp.prostate) for m, lp in zip(maps, part)]
    return scores


# -- training ------------------------------------------------------------------


def split_cores(records, folds, test_fold: int):
    """(train, validation, test) record lists for one outer fold.

    Validation is the next fold round the ring; with only two folds there is
    no spare fold and the training cores double as validation.
    """
    k = folds.k
    val_fold = (test_fold + 1) % k if k >= 3 else None
    train, val, test = [], [], []
    for r in records:
        f = folds.fold_of(r.patient_id)
        if f == test_fold:
            test.append(r)
        elif f == val_fold:
            val.append(r)
        else:
            train.append(r)
    return train, (val if val_fold is not None else list(train)), test


def core_loss(tape: Tape, net: SegNet, pair, rec, config: TrainConfig, bound) -> Tensor:
    if config.mode in ("none", "translate"):
        y_hat = forward_seg(net, pair.x_weak, tape, bound)
    else:
        pw, ps = dual_forward(net, pair.x_weak, pair.x_strong, tape, bound)
        y_hat = fuse(pw, ps, config.fusion, tape)
    region = region_mask(pair.needle_w, pair.prostate_w).mask.reshape(y_hat.values.shape)
    if config.loss == "imse":
        return loss_imse(tape, y_hat.tensor, region, rec.involvement, config.imse_form)
    return loss_maskce(tape, y_hat.tensor, region, 1.0 if rec.involvement > 0 else 0.0)


def train(dataset, folds, config: TrainConfig, test_fold: int = 0, net: SegNet | None = None,
          aug_log: list | None = None) -> tuple[SegNet, TrainHistory]:
    """Train one outer fold; returns the best-validation-AUROC network and history.

    Gradients of a batch are summed core by core in a fixed order and
    divided by the batch size before the optimizer step.
    """
    train_recs, val_recs, _ = split_cores(dataset.records, folds, test_fold)
    if not train_recs:
        raise TrainingError(f"fold {test_fold}: no training cores")
    if config.mode == "cine" and any(dataset.load(r.core_id).frames.shape[0] < 2 for r in train_recs):
        raise TrainingError("mode 'cine' needs at least two frames per core")

    if net is None:
        loop0 = dataset.load(train_recs[0].core_id)
        h, w = loop0.frames.shape[1:]
        net = SegNet.init(SegNetConfig(height=h, width=w, channels=config.channels, seed=config.seed))
    net = net.copy()
    opt = Adam(config.lr, *config.betas)
    averages = {}
    if config.mode == "cine":
        averages = {r.core_id: temporal_average(dataset.load(r.core_id).frames[1:]) for r in train_recs + val_recs}
    val_loops = [dataset.load(r.core_id) for r in val_recs]
    val_avgs = [averages[r.core_id] for r in val_recs] if config.mode == "cine" else None
    val_labels = [r.involvement > 0 for r in val_recs]

    history = TrainHistory()
    best_auc = -1.0
    best_params = None
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = stream(config.seed, 0xE90C, test_fold, epoch).permutation(len(train_recs))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [train_recs[i] for i in order[start : start + config.batch_size]]
            acc = {k: np.zeros_like(v) for k, v in net.params.items()}
            for rec in batch:
                loop = dataset.load(rec.core_id)
                pair = make_pair(loop, config.mode, config.augment, (config.seed, test_fold, epoch, rec.core_id),
                                 averages.get(rec.core_id))
                if aug_log is not None:
                    aug_log.append({"fold": test_fold, "epoch": epoch, "core_id": rec.core_id, "ops": pair.log})
                tape = Tape()
                bound = net.bind(tape)
                loss = core_loss(tape, net, pair, rec, config, bound)
                value = float(loss.values)
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss at fold {test_fold} epoch {epoch} core {rec.core_id}")
                tape.backward(loss)
                for k, t in bound.items():
                    acc[k] += tape.grad(t)
                total += value
            opt.step(net.params, {k: g / len(batch) for k, g in acc.items()})
        train_loss = total / len(train_recs)

        val_auc = None
        if any(val_labels) and not all(val_labels):
            scores = score_cores(net, val_loops, config.mode, config.fusion, val_avgs)
            val_auc = auroc(scores, val_labels)
        history.epochs.append(EpochRecord(epoch, train_loss, val_auc, time.perf_counter() - t0))
        log.info("fold %d epoch %d loss %.5f val_auroc %s", test_fold, epoch, train_loss, val_auc)
        # single-class validation: keep the latest epoch
        if val_auc is None or val_auc > best_auc:
            best_auc = best_auc if val_auc is None else val_auc
            best_params = {k: v.copy() for k, v in net.params.items()}
            history.best_epoch = epoch

    return SegNet(net.config, best_params), history
