"""Four-baseline orchestration: TWOPS, TWPS (hybrid), DLWOPS and DLWPS (cascaded)."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from octcascade import dataio, dataprep, metrics, nn_core, postprocess, training, tradseg
from octcascade.config import ExperimentConfig
from octcascade.metrics import BASELINES, MetricsReport
from octcascade.phantom import BScan, generate_phantom, sample_specs
from octcascade.postprocess import InterfaceCurve

log = logging.getLogger(__name__)

PAIRS = {"TC": ("TWOPS", "TWPS"), "DLC": ("DLWOPS", "DLWPS")}


@dataclass
class Models:
    generator: torch.nn.Module | None = None
    tisn: torch.nn.Module | None = None
    tisn_direct: torch.nn.Module | None = None


@dataclass
class BaselineRun:
    baseline: str
    manifest: str
    out_dir: str
    checkpoints: dict = field(default_factory=dict)
    split: str = "test"

    def __post_init__(self):
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}")


def _pixels(scan) -> np.ndarray:
    return scan.pixels if isinstance(scan, BScan) else np.asarray(scan, dtype=np.float64)


def _tile_width(model, width: int, tile_width: int | None) -> int:
    if tile_width is not None:
        return tile_width
    div = getattr(model, "divisor", 1)
    if width % div:
        raise nn_core.ConfigError(f"scan width {width} not divisible by {div}; pass tile_width")
    return width


def presegment_scan(generator, scan, tile_width: int | None = None) -> np.ndarray:
    """Full-width pre-segmentation assembled from per-tile generator predictions."""
    pixels = _pixels(scan)
    tw = _tile_width(generator, pixels.shape[1], tile_width)
    tiles = dataio.slice_widthwise(pixels, tw)
    preds = nn_core.forward_with_test_time_input(generator, np.stack([t.pixels for t in tiles]))
    out = [dataio.Tile(p, "", t.column_offset) for p, t in zip(preds, tiles)]
    return dataio.reassemble(out, pixels.shape[1])


def tisn_probabilities(net, image, second, tile_width: int | None = None) -> np.ndarray:
    image = _pixels(image)
    second = np.asarray(second, dtype=np.float64)
    tw = _tile_width(net, image.shape[1], tile_width)
    offs = dataio.tile_offsets(image.shape[1], tw)
    probs = nn_core.predict_probabilities(net, np.stack([image[:, o:o + tw] for o in offs]),
                                          np.stack([second[:, o:o + tw] for o in offs]))
    tiles = [dataio.Tile(p, "", o) for p, o in zip(probs, offs)]
    return dataio.reassemble(tiles, image.shape[1])


def segment_scan(scan, baseline: str, models: Models, trad_cfg: tradseg.TradConfig | None = None,
                 tile_width: int | None = None, fit_fraction: float = 0.1,
                 fit_iterations: int = 2) -> InterfaceCurve:
    """Run one baseline on one scan; every route ends in the LOWESS fit."""
    pixels = _pixels(scan)
    if baseline == "TWOPS":
        return tradseg.trad_segment(pixels, trad_cfg)
    if baseline == "TWPS":
        return tradseg.hybrid_segment(pixels, models.generator, trad_cfg, tile_width)
    if baseline == "DLWOPS":
        if models.tisn_direct is None:
            raise nn_core.ConfigError("DLWOPS needs a direct-segmentation network")
        probs = tisn_probabilities(models.tisn_direct, pixels, pixels, tile_width)
    elif baseline == "DLWPS":
        if models.generator is None or models.tisn is None:
            raise nn_core.ConfigError("DLWPS needs both the generator and the TISN")
        preseg = presegment_scan(models.generator, pixels, tile_width)
        probs = tisn_probabilities(models.tisn, pixels, preseg, tile_width)
    else:
        raise ValueError(f"unknown baseline {baseline!r}")
    mask = postprocess.mask_from_probabilities(probs)
    return postprocess.segment_mask(mask, fit_fraction, fit_iterations)


def evaluate_baseline(samples, baseline: str, models: Models, trad_cfg=None, tile_width=None,
                      fit_fraction: float = 0.1, fit_iterations: int = 2, curves_out=None):
    """Segment and score ``(BScan, AnnotationCurve)`` pairs.

    Images whose segmentation raises are kept as failure rows.
    Returns ``(MetricsReport, {id: rows})``.
    """
    records, curves = [], {}
    for scan, ann in samples:
        try:
            curve = segment_scan(scan, baseline, models, trad_cfg, tile_width, fit_fraction, fit_iterations)
        except (postprocess.NoInterfaceError, ValueError) as exc:
            if isinstance(exc, nn_core.ConfigError):
                raise
            records.append(metrics.failure_record(scan.id, str(exc)))
            if curves_out is not None:
                save_failure(Path(curves_out) / f"{scan.id}.json", scan.id, str(exc))
            continue
        curves[scan.id] = curve.rows
        records.append(metrics.evaluate_curve(scan.id, ann.rows, curve, scan.axial_spacing_um,
                                              scan.lateral_spacing_um))
        if curves_out is not None:
            dataio.save_curve(Path(curves_out) / f"{scan.id}.json", scan.id, curve.rows)
    return MetricsReport(baseline, records), curves


def save_failure(path, image_id: str, message: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"id": image_id, "rows": None, "error": message}))


def score_curves(samples, baseline: str, curve_dir) -> MetricsReport:
    """Rebuild a report from curve files written by ``evaluate_baseline``.

    Raises ``FileNotFoundError`` if any image of ``samples`` has no curve file.
    """
    curve_dir = Path(curve_dir)
    missing = [s.id for s, _ in samples if not (curve_dir / f"{s.id}.json").exists()]
    if missing:
        raise FileNotFoundError(f"missing curves for {len(missing)} image(s) in {curve_dir}, e.g. {missing[0]}")
    records = []
    for scan, ann in samples:
        d = json.loads((curve_dir / f"{scan.id}.json").read_text())
        if d["rows"] is None:
            records.append(metrics.failure_record(scan.id, d.get("error", "")))
            continue
        rows = np.asarray(d["rows"], dtype=np.float64)
        records.append(metrics.evaluate_curve(scan.id, ann.rows, rows, scan.axial_spacing_um,
                                              scan.lateral_spacing_um))
    return MetricsReport(baseline, records)


def load_models(checkpoints: dict) -> Models:
    """Build ``Models`` from ``{"generator"|"tisn"|"tisn_direct": path}``."""
    models = Models()
    for role, path in checkpoints.items():
        if role not in ("generator", "tisn", "tisn_direct"):
            raise ValueError(f"unknown checkpoint role {role!r}")
        model, _ = nn_core.load_checkpoint(path)
        setattr(models, role, model)
    return models


REQUIRED = {"TWOPS": (), "TWPS": ("generator",), "DLWOPS": ("tisn_direct",), "DLWPS": ("generator", "tisn")}


def run_baseline(run: BaselineRun, trad_cfg=None, tile_width=None, fit_fraction: float = 0.1,
                 fit_iterations: int = 2) -> MetricsReport:
    """Evaluate one baseline over a manifest split; writes curves/ and reports/."""
    missing = [r for r in REQUIRED[run.baseline] if r not in run.checkpoints]
    if missing:
        raise nn_core.ConfigError(f"{run.baseline} needs checkpoints for {missing}")
    models = load_models({r: run.checkpoints[r] for r in REQUIRED[run.baseline]})
    manifest = dataio.DatasetManifest.load(run.manifest)
    samples = [manifest.load_entry(e) for e in manifest.split(run.split)]
    out = Path(run.out_dir)
    report, _ = evaluate_baseline(samples, run.baseline, models, trad_cfg, tile_width, fit_fraction,
                                  fit_iterations, curves_out=out / "curves" / run.baseline.lower())
    report.save(out / "reports")
    return report


# --- comparison -------------------------------------------------------------

def _t_test(without: MetricsReport, with_: MetricsReport, metric: str) -> dict:
    a = {r.id: getattr(r, metric) for r in without.ok()}
    b = {r.id: getattr(r, metric) for r in with_.ok()}
    ids = [i for i in without.ids if i in a and i in b]
    res = {"n": len(ids), "t": None, "p": None, "status": "ok"}
    try:
        t, p = metrics.paired_t_test([a[i] for i in ids], [b[i] for i in ids])
        res.update(t=t, p=p)
    except metrics.DegenerateStatisticError:
        res["status"] = "degenerate"
    except ValueError as exc:
        res["status"] = f"undefined: {exc}"
    return res


def compare_baselines(reports: dict, out_dir=None) -> dict:
    """TC and DLC pairings, paired t-tests per metric, plots and a summary table.

    ``reports`` maps baseline name to ``MetricsReport``; all must cover the same ids.
    """
    if set(reports) != set(BASELINES):
        raise ValueError(f"need reports for all of {BASELINES}")
    ids = sorted(reports["TWOPS"].ids)
    for name, rep in reports.items():
        if sorted(rep.ids) != ids:
            raise ValueError(f"report {name} covers a different corpus")
    bundle = {"pairs": {}, "p_values": {}, "dlwps_vs": {}, "failures": {}, "medians": {}}
    for name, rep in reports.items():
        bundle["failures"][name] = rep.failures
        bundle["medians"][name] = {m: rep.aggregate(m)["median"] for m in ("hd_um", "madlbp_px")}
    for pair, (without, with_) in PAIRS.items():
        bundle["pairs"][pair] = {
            "without": without, "with": with_,
            "max_error": metrics.max_error_pairing(reports[without], reports[with_]),
        }
        bundle["p_values"][pair] = {m: _t_test(reports[without], reports[with_], m)
                                    for m in ("hd_um", "madlbp_px")}
    for other in ("TWOPS", "TWPS", "DLWOPS"):
        bundle["dlwps_vs"][other] = {m: _t_test(reports[other], reports["DLWPS"], m)
                                     for m in ("hd_um", "madlbp_px")}
    bundle["table"] = p_value_table(bundle)
    if out_dir is not None:
        out = Path(out_dir)
        bundle["plots"] = write_plots(reports, bundle, out / "plots")
        for rep in reports.values():
            rep.save(out / "reports")
        (out / "summary.json").write_text(json.dumps(bundle, indent=2, default=_json_default))
    return bundle


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def _fmt(p) -> str:
    if p is None:
        return "n/a"
    return f"{p:.4e}" if p < 1e-3 else f"{p:.4f}"


def p_value_table(bundle: dict) -> str:
    """Text table with metrics as rows and comparisons as columns."""
    cols = [("TC", bundle["p_values"]["TC"]), ("DLC", bundle["p_values"]["DLC"])]
    cols += [(f"DLWPS vs {k}", v) for k, v in bundle["dlwps_vs"].items()]
    header = "metric".ljust(10) + "".join(name.rjust(18) for name, _ in cols)
    lines = [header]
    for metric, label in (("hd_um", "p_HD"), ("madlbp_px", "p_MADLBP")):
        lines.append(label.ljust(10) + "".join(_fmt(c[metric]["p"]).rjust(18) for _, c in cols))
    return "\n".join(lines)


def write_plots(reports: dict, bundle: dict, plot_dir) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir = Path(plot_dir)
    plot_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric, unit in (("hd_um", "HD (um)"), ("madlbp_px", "MADLBP (px)")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        data = [reports[b].values(metric) for b in BASELINES]
        ax.boxplot([d if d.size else [np.nan] for d in data])
        ax.set_xticks(range(1, len(BASELINES) + 1), BASELINES)
        ax.set_ylabel(unit)
        path = plot_dir / f"boxplot_{metric}.png"
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        written.append(str(path))
    for pair, info in bundle["pairs"].items():
        fig, ax = plt.subplots(figsize=(5, 3.5))
        recs = info["max_error"]
        xs = range(len(recs))
        ax.plot(xs, [r["without"] for r in recs], "o-", color="purple", label=info["without"])
        ax.plot(xs, [r["with"] for r in recs], "s-", color="black", label=info["with"])
        ax.set_xticks(list(xs), [r["dataset"] for r in recs], rotation=45)
        ax.set_ylabel("max HD per dataset (um)")
        ax.legend()
        path = plot_dir / f"max_error_{pair}.png"
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        written.append(str(path))
    return written


# --- end-to-end -------------------------------------------------------------

def make_corpus(cfg: ExperimentConfig, split: str, severity: str | None = None, n: int | None = None,
                seed_offset: int = 0):
    p = cfg.phantom
    count = n if n is not None else (p.n_train if split == "train" else p.n_test)
    sev = severity or (p.train_severity if split == "train" else p.test_severity)
    base = cfg.seeds.phantom * 1000 + (0 if split == "train" else 500) + seed_offset
    specs = sample_specs(count, base, p.width, p.height, sev, prefix=f"{split[:2]}{sev[0]}",
                         scans_per_dataset=p.scans_per_dataset)
    for s in specs:
        s.axial_spacing_um = p.axial_spacing_um
        s.lateral_spacing_um = p.lateral_spacing_um
    return specs, [generate_phantom(s) for s in specs]


def seeded(seed: int, fn, *args):
    torch.manual_seed(seed)
    return fn(*args)


def train_models(cfg: ExperimentConfig, train_samples, which=("generator", "tisn", "tisn_direct")):
    """Train the generator, the cascaded TISN and the direct TISN on phantom samples."""
    scans = [s for s, _ in train_samples]
    anns = [a for _, a in train_samples]
    targets = dataprep.build_targets(scans, anns, cfg.dataprep.tile_width, cfg.dataprep.shift_px)
    seed = cfg.seeds.training
    models, logs = Models(), {}
    if "generator" in which or "tisn" in which and cfg.evaluation.tisn_input == "generator":
        gen = seeded(seed, nn_core.build_generator, cfg.generator)
        disc = seeded(seed + 1, nn_core.build_discriminator, cfg.discriminator)
        models.generator, logs["cgan"] = training.train_cgan(
            training.CganDataset.from_targets(targets), cfg.training_cgan, gen, disc)
    if "tisn" in which:
        mode = cfg.evaluation.tisn_input
        ds = training.build_tisn_training_inputs(
            targets.images, targets.rows, gold_presegs=targets.presegs if mode == "gold" else None,
            generator=models.generator if mode == "generator" else None, mode=mode)
        net = seeded(seed + 2, nn_core.build_tisn, cfg.tisn)
        models.tisn, logs["tisn"] = training.train_tisn(ds, cfg.training_tisn, net)
    if "tisn_direct" in which:
        ds = training.build_tisn_training_inputs(targets.images, targets.rows, mode="replicate")
        net = seeded(seed + 3, nn_core.build_tisn, cfg.tisn)
        models.tisn_direct, logs["tisn_direct"] = training.train_tisn(ds, cfg.training_tisn, net)
    return models, logs


def run_experiment(cfg: ExperimentConfig, out_dir=None, test_samples=None, models: Models | None = None):
    """Synthesize, train (unless ``models`` is given), evaluate all baselines and compare."""
    t0 = time.perf_counter()
    logs = {}
    if models is None:
        _, train_samples = make_corpus(cfg, "train")
        models, logs = train_models(cfg, train_samples)
    if test_samples is None:
        _, test_samples = make_corpus(cfg, "test")
    reports = {}
    for b in BASELINES:
        reports[b], _ = evaluate_baseline(test_samples, b, models, cfg.tradseg, cfg.dataprep.tile_width,
                                          cfg.evaluation.fit_fraction, cfg.evaluation.fit_iterations)
    bundle = compare_baselines(reports, out_dir)
    bundle["runtime_s"] = time.perf_counter() - t0
    if out_dir is not None:
        for name, tl in logs.items():
            tl.save(Path(out_dir) / "logs", name)
    return {"reports": reports, "bundle": bundle, "models": models, "logs": logs}
