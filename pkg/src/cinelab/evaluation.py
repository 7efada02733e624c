"""Cross-validated evaluation of a trained run and its report files."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from cinelab.metrics import (
    SPECIFICITIES,
    MetricError,
    ScoredCore,
    auroc,
    balanced_accuracy,
    choose_threshold,
    high_involvement_subset,
    roc_points,
    sensitivity_at_specificity,
    unpack,
)
from cinelab.supervision import score_cores, split_cores

METRICS = ("auroc", "auroc_high_inv", "balanced_accuracy") + tuple(
    f"sens_at_spec_{round(s * 100)}" for s in SPECIFICITIES
)
HEADERS = {
    "auroc": "AUROC",
    "auroc_high_inv": "AUROC(inv>0.35)",
    "balanced_accuracy": "BalAcc",
    "sens_at_spec_20": "Sens@20Spe",
    "sens_at_spec_40": "Sens@40Spe",
    "sens_at_spec_60": "Sens@60Spe",
}


@dataclass
class FoldMetrics:
    fold: int
    n_test: int
    n_positive: int
    threshold: float | None
    values: dict[str, float | None]
    warnings: list[str] = field(default_factory=list)


def _try(fold, name, fn, warnings):
    try:
        return float(fn())
    except MetricError as exc:
        warnings.append(f"fold {fold}: {name} absent ({exc})")
        return None


def fold_metrics(fold: int, test: list[ScoredCore], val: list[ScoredCore]) -> FoldMetrics:
    """Every metric on one fold's held-out cores; the operating threshold comes from ``val``."""
    warnings: list[str] = []
    s, y = unpack(test)
    values = {"auroc": _try(fold, "auroc", lambda: auroc(s, y), warnings)}
    hs, hy = unpack(high_involvement_subset(test))
    values["auroc_high_inv"] = _try(fold, "auroc_high_inv", lambda: auroc(hs, hy), warnings)

    vs, vy = unpack(val)
    threshold = _try(fold, "threshold", lambda: choose_threshold(vs, vy), warnings)
    if threshold is None:
        warnings.append(f"fold {fold}: balanced_accuracy absent (no validation threshold)")
        values["balanced_accuracy"] = None
    else:
        values["balanced_accuracy"] = _try(
            fold, "balanced_accuracy", lambda: balanced_accuracy(s, y, threshold), warnings)
    for spec in SPECIFICITIES:
        name = f"sens_at_spec_{round(spec * 100)}"
        values[name] = _try(fold, name, lambda: sensitivity_at_specificity(s, y, spec), warnings)
    return FoldMetrics(fold, len(test), int(y.sum()), threshold, values, warnings)


def mean_std(values) -> tuple[float | None, float | None]:
    """Mean and population standard deviation, skipping absent (None) entries."""
    present = np.array([v for v in values if v is not None], dtype=np.float64)
    if present.size == 0:
        return None, None
    return float(present.mean()), float(present.std(ddof=0))


@dataclass
class MetricsReport:
    k: int
    folds: list[FoldMetrics]
    cores: list[dict] = field(default_factory=list)
    curves: list[tuple[str, list[float], list[float]]] = field(default_factory=list, repr=False)

    @property
    def per_fold(self) -> dict[str, list[float | None]]:
        return {m: [f.values[m] for f in self.folds] for m in METRICS}

    @property
    def summary(self) -> dict[str, dict[str, float | None]]:
        out = {}
        for m, vals in self.per_fold.items():
            mean, std = mean_std(vals)
            out[m] = {"mean": mean, "std": std, "n_folds": sum(v is not None for v in vals)}
        return out

    @property
    def warnings(self) -> list[str]:
        return [w for f in self.folds for w in f.warnings]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "metrics": list(METRICS),
            "per_fold": self.per_fold,
            "summary": self.summary,
            "folds": [asdict(f) for f in self.folds],
            "warnings": self.warnings,
            "cores": self.cores,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def rows(self) -> list[list[str]]:
        def fmt(v):
            return "-" if v is None else f"{v:.3f}"

        rows = [["fold"] + [HEADERS[m] for m in METRICS]]
        for f in self.folds:
            rows.append([str(f.fold)] + [fmt(f.values[m]) for m in METRICS])
        summ = self.summary
        rows.append(["mean"] + [fmt(summ[m]["mean"]) for m in METRICS])
        rows.append(["std"] + [fmt(summ[m]["std"]) for m in METRICS])
        return rows

    def table(self) -> str:
        rows = self.rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def tsv(self) -> str:
        return "".join("\t".join(r) + "\n" for r in self.rows())


def report_from_scores(test_by_fold: list[list[ScoredCore]], val_by_fold: list[list[ScoredCore]]) -> MetricsReport:
    if len(test_by_fold) != len(val_by_fold):
        raise ValueError("need one validation set per fold")
    folds, cores, curves = [], [], []
    for f, (test, val) in enumerate(zip(test_by_fold, val_by_fold)):
        folds.append(fold_metrics(f, test, val))
        for c in test:
            cores.append({"core_id": c.record.core_id, "patient_id": c.record.patient_id, "fold": f,
                          "involvement": c.record.involvement, "score": float(c.score)})
        s, y = unpack(test)
        if y.any() and not y.all():
            fpr, tpr = roc_points(s, y)
            curves.append((f"fold {f} (AUROC {folds[-1].values['auroc']:.3f})", fpr.tolist(), tpr.tolist()))
    return MetricsReport(len(folds), folds, cores, curves)


def evaluate_run(models, dataset, folds, mode: str, fusion) -> MetricsReport:
    """Score each fold's held-out cores with that fold's network and compute the report.

    ``models[f]`` is the network trained with fold ``f`` held out.  Its
    validation fold (the one used for checkpoint selection) also fixes the
    balanced-accuracy threshold, so no test scores leak into it.
    """
    if len(models) != folds.k:
        raise ValueError(f"expected {folds.k} fold models, got {len(models)}")
    test_by_fold, val_by_fold = [], []
    for f, net in enumerate(models):
        _, val, test = split_cores(dataset.records, folds, f)
        for recs, sink in ((test, test_by_fold), (val, val_by_fold)):
            scores = score_cores(net, [dataset.load(r.core_id) for r in recs], mode, fusion) if recs else []
            sink.append([ScoredCore(r, s) for r, s in zip(recs, scores)])
    return report_from_scores(test_by_fold, val_by_fold)


def write_report(report: MetricsReport, out_dir) -> dict[str, Path]:
    """metrics.json, metrics.txt (aligned), metrics.tsv and roc.png under ``out_dir``."""
    from cinelab.plotting import roc_figure

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "metrics.json", "table": out / "metrics.txt", "tsv": out / "metrics.tsv",
             "roc": out / "roc.png"}
    paths["json"].write_text(report.to_json())
    text = report.table()
    if report.warnings:
        text += "\nwarnings:\n" + "".join(f"  {w}\n" for w in report.warnings)
    paths["table"].write_text(text)
    paths["tsv"].write_text(report.tsv())
    roc_figure(report.curves, paths["roc"])
    return paths
