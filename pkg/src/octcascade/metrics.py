"""Boundary error metrics, per-image max-error pairing and paired t-tests."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from octcascade.postprocess import InterfaceCurve

BASELINES = ("TWOPS", "TWPS", "DLWOPS", "DLWPS")


class DegenerateStatisticError(ValueError):
    pass


def _rows(c) -> np.ndarray:
    return np.asarray(c.rows if isinstance(c, InterfaceCurve) else c, dtype=np.float64)


def madlbp(g, s) -> float:
    """Mean absolute per-column difference of floored boundary rows, in pixels."""
    yg, ys = _rows(g), _rows(s)
    if yg.shape != ys.shape:
        raise ValueError(f"curve widths differ: {yg.size} vs {ys.size}")
    return float(np.mean(np.abs(np.floor(yg) - np.floor(ys))))


def curve_points(c, axial_um: float, lateral_um: float) -> np.ndarray:
    y = _rows(c)
    x = np.arange(y.size, dtype=np.float64)
    return np.stack([x * lateral_um, y * axial_um], axis=1)


def hausdorff(g, s, axial_um: float = 1.0, lateral_um: float = 1.0) -> float:
    """Symmetric Hausdorff distance between the two curves' point sets, in microns."""
    yg, ys = _rows(g), _rows(s)
    if yg.shape != ys.shape:
        raise ValueError(f"curve widths differ: {yg.size} vs {ys.size}")
    if axial_um <= 0 or lateral_um <= 0:
        raise ValueError("spacings must be positive")
    pg = curve_points(yg, axial_um, lateral_um)
    ps = curve_points(ys, axial_um, lateral_um)
    d2 = ((pg[:, None, :] - ps[None, :, :]) ** 2).sum(axis=-1)
    return float(math.sqrt(max(d2.min(axis=1).max(), d2.min(axis=0).max())))


@dataclass
class ImageRecord:
    id: str
    madlbp_px: float
    hd_um: float
    dataset: str = ""
    failed: bool = False
    message: str = ""

    def __post_init__(self):
        if not self.dataset:
            self.dataset = dataset_of(self.id)


def dataset_of(image_id: str) -> str:
    """Pseudo-volume an image belongs to: the id prefix before the first underscore."""
    return image_id.split("_", 1)[0] if "_" in image_id else image_id


def failure_record(image_id: str, message: str) -> ImageRecord:
    return ImageRecord(image_id, float("nan"), float("nan"), failed=True, message=message)


@dataclass
class MetricsReport:
    baseline: str
    records: list = field(default_factory=list)

    def __post_init__(self):
        for r in self.records:
            if not r.failed and (r.madlbp_px < 0 or r.hd_um < 0):
                raise ValueError(f"negative metric for {r.id}")

    @property
    def ids(self) -> list:
        return [r.id for r in self.records]

    def ok(self) -> list:
        return [r for r in self.records if not r.failed]

    @property
    def failures(self) -> int:
        return sum(r.failed for r in self.records)

    def values(self, metric: str) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.ok()], dtype=np.float64)

    def aggregate(self, metric: str) -> dict:
        ok = self.ok()
        if not ok:
            return {"mean": None, "median": None, "max": None, "argmax": None, "n": 0}
        v = self.values(metric)
        i = int(np.argmax(v))
        return {"mean": float(v.mean()), "median": float(np.median(v)), "max": float(v[i]),
                "argmax": ok[i].id, "n": len(ok)}

    def summary(self) -> dict:
        return {"baseline": self.baseline, "n_images": len(self.records), "failures": self.failures,
                "madlbp_px": self.aggregate("madlbp_px"), "hd_um": self.aggregate("hd_um")}

    def save(self, out_dir, stem: str | None = None) -> None:
        from octcascade.dataio import write_csv

        out_dir = Path(out_dir)
        stem = stem or self.baseline.lower()
        write_csv(out_dir / f"{stem}.csv",
                  [{"id": r.id, "dataset": r.dataset, "madlbp_px": r.madlbp_px, "hd_um": r.hd_um,
                    "failed": int(r.failed), "message": r.message} for r in self.records],
                  ["id", "dataset", "madlbp_px", "hd_um", "failed", "message"])
        (out_dir / f"{stem}.json").write_text(json.dumps(self.summary(), indent=2))

    @classmethod
    def load_csv(cls, path, baseline: str) -> "MetricsReport":
        import csv

        records = []
        with Path(path).open() as fh:
            for row in csv.DictReader(fh):
                records.append(ImageRecord(row["id"], float(row["madlbp_px"]), float(row["hd_um"]),
                                           row["dataset"], bool(int(row["failed"])), row["message"]))
        return cls(baseline, records)


def evaluate_curve(image_id: str, truth, curve, axial_um: float, lateral_um: float) -> ImageRecord:
    return ImageRecord(image_id, madlbp(truth, curve), hausdorff(truth, curve, axial_um, lateral_um))


def max_error_pairing(report_without: MetricsReport, report_with: MetricsReport,
                      metric: str = "hd_um") -> list[dict]:
    """Per dataset: the worst image under WITHOUT, and the same image's error under WITH.

    Images that failed in either report are skipped.
    """
    if sorted(report_without.ids) != sorted(report_with.ids):
        raise ValueError("reports cover different image ids")
    with_by_id = {r.id: r for r in report_with.records}
    groups: dict[str, list] = {}
    for r in report_without.records:
        if r.failed or with_by_id[r.id].failed:
            continue
        groups.setdefault(r.dataset, []).append(r)
    pairs = []
    for ds in sorted(groups):
        recs = groups[ds]
        worst = max(range(len(recs)), key=lambda i: getattr(recs[i], metric))
        rw = recs[worst]
        pairs.append({"dataset": ds, "id": rw.id, "index": worst,
                      "without": getattr(rw, metric), "with": getattr(with_by_id[rw.id], metric)})
    return pairs


def paired_t_test(errors_a, errors_b) -> tuple[float, float]:
    """Two-sided paired t-test on ``a - b``; raises on zero-variance differences."""
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs n >= 2")
    d = a - b
    sd = d.std(ddof=1)
    if not sd > 1e-12 * max(1.0, np.abs(d).max()):
        raise DegenerateStatisticError("differences have zero variance; t is undefined")
    t = d.mean() / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return float(t), float(min(p, 1.0))
