"""Command-line entry point.

Every subcommand reads one JSON experiment config and writes under ``--out``:

    data/          phantoms, annotations, manifest.json      (synth)
    prepared/      training tiles and targets (targets.npz)  (prepare)
    checkpoints/   generator.pt, tisn.pt, tisn_direct.pt     (train-cgan, train-tisn)
    logs/          per-epoch training logs
    presegs/       full-width pre-segmentations              (presegment)
    curves/<b>/    fitted interface per image                (segment, hybrid)
    reports/       per-baseline CSV and JSON                 (evaluate)
    plots/, summary.json                                     (compare)
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from octcascade import config as config_mod
from octcascade import dataio, dataprep, nn_core, pipeline, training
from octcascade.metrics import BASELINES, MetricsReport
from octcascade.phantom import PhantomError, generate_corpus

log = logging.getLogger("octcascade")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
SUBCOMMANDS = ("synth", "prepare", "train-cgan", "train-tisn", "presegment", "segment", "hybrid",
               "evaluate", "compare")
ROLE_OF_KIND = {"generator": "generator", "tisn": "tisn", "tisn-direct": "tisn_direct"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with exit code 1 (not 2) for usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON (defaults if omitted)")
    common.add_argument("--out", type=Path, default=None,
                        help="output root (default: $OCTCASCADE_OUT or ./octcascade_out)")
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--baseline", choices=[b.lower() for b in BASELINES], default=None,
                        help="restrict to one baseline")
    common.add_argument("--checkpoint", type=Path, action="append", default=[],
                        help="model checkpoint (.pt with .json sidecar); repeatable")
    common.add_argument("--quiet", action="store_true", help="only print errors")

    parser = _Parser(
        prog="octcascade",
        description="Cascaded pre-segmentation and interface segmentation of OCT B-scans.",
        epilog="config sections and keys:\n" + config_mod.schema_help()
               + "\n\nexit codes: 0 success, 1 validation/usage error, 2 runtime failure",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}",
                                parser_class=_Parser)
    helps = {
        "synth": "generate the phantom corpus and manifest",
        "prepare": "tile the training split and build pre-seg / weight / label targets",
        "train-cgan": "train the pre-segmentation generator",
        "train-tisn": "train the cascaded and direct segmentation networks",
        "presegment": "run the generator over the test split",
        "segment": "segment the test split with one or all baselines",
        "hybrid": "segment the test split with the traditional method on pre-segmentations",
        "evaluate": "score written curves against the annotations",
        "compare": "paired comparisons, p-value table and plots",
    }
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
    return parser


# --- helpers ----------------------------------------------------------------

def _out_root(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get("OCTCASCADE_OUT", "octcascade_out"))


def _load_cfg(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load_config(args.config) if args.config else config_mod.from_dict({})
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _manifest(out: Path) -> dataio.DatasetManifest:
    path = out / "data" / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}; run `synth` first")
    return dataio.DatasetManifest.load(path)


def _samples(out: Path, split: str):
    m = _manifest(out)
    samples = [m.load_entry(e) for e in m.split(split)]
    if not samples:
        raise RuntimeError(f"manifest has no {split!r} images")
    return samples


def _checkpoints(args, out: Path) -> dict:
    """Role -> path from --checkpoint flags, falling back to out/checkpoints/."""
    found = {}
    for path in args.checkpoint:
        meta = path.with_suffix(".json")
        if not meta.exists():
            raise FileNotFoundError(f"checkpoint sidecar {meta} not found")
        kind = json.loads(meta.read_text())["kind"]
        if kind not in ROLE_OF_KIND:
            raise config_mod.ConfigValidationError(f"{path}: checkpoint kind {kind!r} is not usable here")
        found[ROLE_OF_KIND[kind]] = path
    for role in ("generator", "tisn", "tisn_direct"):
        default = out / "checkpoints" / f"{role}.pt"
        if role not in found and default.exists():
            found[role] = default
    return found


def _baselines(args, default=BASELINES) -> tuple:
    return (args.baseline.upper(),) if args.baseline else tuple(default)


def _targets(cfg, out: Path) -> dataprep.TargetSet:
    path = out / "prepared" / "targets.npz"
    if not path.exists():
        raise FileNotFoundError(f"no prepared targets at {path}; run `prepare` first")
    d = np.load(path)
    return dataprep.TargetSet(list(d["images"]), list(d["presegs"]), list(d["weights"]),
                              list(d["labels"]), list(d["rows"]), list(d["ids"]))


# --- subcommands ------------------------------------------------------------

def cmd_synth(cfg, args, out: Path) -> None:
    train_specs, _ = pipeline.make_corpus(cfg, "train")
    test_specs, _ = pipeline.make_corpus(cfg, "test")
    manifest = generate_corpus(train_specs + test_specs, out / "data", n_train=len(train_specs))
    log.info("wrote %d phantoms to %s", len(manifest.entries), out / "data")


def cmd_prepare(cfg, args, out: Path) -> None:
    samples = _samples(out, "train")
    t = dataprep.build_targets([s for s, _ in samples], [a for _, a in samples],
                               cfg.dataprep.tile_width, cfg.dataprep.shift_px)
    path = out / "prepared" / "targets.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, images=np.stack(t.images), presegs=np.stack(t.presegs),
                        weights=np.stack(t.weights), labels=np.stack(t.labels), rows=np.stack(t.rows),
                        ids=np.array(t.ids))
    log.info("prepared %d tiles", len(t.images))


def cmd_train_cgan(cfg, args, out: Path) -> None:
    t = _targets(cfg, out)
    seed = cfg.seeds.training
    gen = pipeline.seeded(seed, nn_core.build_generator, cfg.generator)
    disc = pipeline.seeded(seed + 1, nn_core.build_discriminator, cfg.discriminator)
    gen, tlog = training.train_cgan(training.CganDataset.from_targets(t), cfg.training_cgan, gen, disc)
    nn_core.save_checkpoint(out / "checkpoints" / "generator.pt", gen, "generator", cfg.generator, seed,
                            {"best_epoch": tlog.best_epoch})
    tlog.save(out / "logs", "cgan")
    log.info("generator: best epoch %d (%s)", tlog.best_epoch, tlog.stop_reason)


def cmd_train_tisn(cfg, args, out: Path) -> None:
    t = _targets(cfg, out)
    seed = cfg.seeds.training
    which = {"dlwops": ("tisn_direct",), "dlwps": ("tisn",)}.get(args.baseline, ("tisn", "tisn_direct"))
    if args.baseline in ("twops", "twps"):
        raise config_mod.ConfigValidationError(f"baseline {args.baseline} has no segmentation network")
    if "tisn" in which:
        mode = cfg.evaluation.tisn_input
        generator = None
        if mode == "generator":
            ckpt = _checkpoints(args, out)
            if "generator" not in ckpt:
                raise FileNotFoundError("tisn_input=generator needs a generator checkpoint")
            generator, _ = nn_core.load_checkpoint(ckpt["generator"])
        ds = training.build_tisn_training_inputs(
            t.images, t.rows, gold_presegs=t.presegs if mode == "gold" else None,
            generator=generator, mode=mode)
        net = pipeline.seeded(seed + 2, nn_core.build_tisn, cfg.tisn)
        net, tlog = training.train_tisn(ds, cfg.training_tisn, net)
        nn_core.save_checkpoint(out / "checkpoints" / "tisn.pt", net, "tisn", cfg.tisn, seed,
                                {"best_epoch": tlog.best_epoch, "tisn_input": mode})
        tlog.save(out / "logs", "tisn")
    if "tisn_direct" in which:
        ds = training.build_tisn_training_inputs(t.images, t.rows, mode="replicate")
        net = pipeline.seeded(seed + 3, nn_core.build_tisn, cfg.tisn)
        net, tlog = training.train_tisn(ds, cfg.training_tisn, net)
        nn_core.save_checkpoint(out / "checkpoints" / "tisn_direct.pt", net, "tisn-direct", cfg.tisn, seed,
                                {"best_epoch": tlog.best_epoch})
        tlog.save(out / "logs", "tisn_direct")


def cmd_presegment(cfg, args, out: Path) -> None:
    ckpt = _checkpoints(args, out)
    if "generator" not in ckpt:
        raise FileNotFoundError("no generator checkpoint; run `train-cgan` or pass --checkpoint")
    gen, _ = nn_core.load_checkpoint(ckpt["generator"])
    for scan, _ in _samples(out, "test"):
        pre = pipeline.presegment_scan(gen, scan, cfg.dataprep.tile_width)
        dataio.save_bscan_png(out / "presegs" / f"{scan.id}.png", pre)


def _segment(cfg, args, out: Path, baselines) -> None:
    samples = _samples(out, "test")
    ckpt = _checkpoints(args, out)
    for b in baselines:
        missing = [r for r in pipeline.REQUIRED[b] if r not in ckpt]
        if missing:
            raise FileNotFoundError(f"{b} needs checkpoint(s) {missing}")
    for b in baselines:
        models = pipeline.load_models({r: ckpt[r] for r in pipeline.REQUIRED[b]})
        report, _ = pipeline.evaluate_baseline(
            samples, b, models, cfg.tradseg, cfg.dataprep.tile_width, cfg.evaluation.fit_fraction,
            cfg.evaluation.fit_iterations, curves_out=out / "curves" / b.lower())
        log.info("%s: %d images, %d failures", b, len(report.records), report.failures)


def cmd_segment(cfg, args, out: Path) -> None:
    _segment(cfg, args, out, _baselines(args, cfg.evaluation.baselines))


def cmd_hybrid(cfg, args, out: Path) -> None:
    if args.baseline not in (None, "twps"):
        raise config_mod.ConfigValidationError("hybrid always runs the TWPS baseline")
    _segment(cfg, args, out, ("TWPS",))


def cmd_evaluate(cfg, args, out: Path) -> None:
    samples = _samples(out, "test")
    for b in _baselines(args, cfg.evaluation.baselines):
        curve_dir = out / "curves" / b.lower()
        if not curve_dir.is_dir():
            raise FileNotFoundError(f"missing curves for {b}: {curve_dir} does not exist; run `segment` first")
        report = pipeline.score_curves(samples, b, curve_dir)
        report.save(out / "reports")
        s = report.summary()
        log.info("%s: median HD %.2f um, median MADLBP %.2f px, %d failures", b,
                 s["hd_um"]["median"] or float("nan"), s["madlbp_px"]["median"] or float("nan"),
                 s["failures"])


def cmd_compare(cfg, args, out: Path) -> None:
    reports = {}
    for b in BASELINES:
        path = out / "reports" / f"{b.lower()}.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing report {path}; run `evaluate` for all four baselines")
        reports[b] = MetricsReport.load_csv(path, b)
    bundle = pipeline.compare_baselines(reports, out)
    if not args.quiet:
        print(bundle["table"])


COMMANDS = {
    "synth": cmd_synth, "prepare": cmd_prepare, "train-cgan": cmd_train_cgan, "train-tisn": cmd_train_tisn,
    "presegment": cmd_presegment, "segment": cmd_segment, "hybrid": cmd_hybrid, "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("octcascade: error: a subcommand is required", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_cfg(args)
    except (config_mod.ConfigValidationError, FileNotFoundError) as exc:
        print(f"octcascade: config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    torch.manual_seed(cfg.seeds.training)
    out = _out_root(args)
    try:
        COMMANDS[args.command](cfg, args, out)
    except (config_mod.ConfigValidationError, nn_core.ConfigError, PhantomError) as exc:
        print(f"octcascade: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FileNotFoundError, RuntimeError, ValueError, OSError) as exc:
        print(f"octcascade: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
