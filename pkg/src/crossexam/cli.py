"""Command-line entry point: ``crossexam <verb> [--config PATH] [--out DIR] [--seed U64] [--jobs N]``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, plotting, reports
from .config import ConfigError, ExperimentConfig, RunManifest
from .data import DatasetError, load_dataset, save_dataset
from .detection import cross_examine
from .population import (PopulationError, ablate_similarity_metric, evaluate_population, layer_probe_study,
                         make_bundle, member_trigger, plan_population, poison_rate_sweep, train_member)
from .similarity import SimilarityError
from .training import CheckpointError, load_checkpoint, save_checkpoint

log = logging.getLogger("crossexam")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4
LAYER_COLUMNS = ("seed", "pair_id", "pair_type", "layer", "similarity", "attack_asr")
NUMERIC_ERRORS = (FloatingPointError, SimilarityError)
SWEEP_COLUMNS = ("rate", "dsr", "fpr", "f1", "mean_attack_asr", "degraded", "note")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.jobs is not None:
        changes["jobs"] = args.jobs
    try:
        return replace(cfg, **changes) if changes else cfg
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _start(cfg: ExperimentConfig, command: str) -> tuple[Path, RunManifest]:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json", portable=True)
    return out, RunManifest(command, cfg.digest())


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out, manifest = _start(cfg, "train")
    with manifest.timed("dataset"):
        bundle = make_bundle(cfg)
        save_dataset(bundle, out / "dataset.ldds")
    kind = args.kind or (cfg.attack.kinds[0] if cfg.attack.poison_rate > 0 else "clean")
    plan = plan_population(replace(cfg, population=replace(cfg.population, n_clean=args.count,
                                                           n_backdoored=args.count)))
    members = [m for m in plan if (m.kind == "clean") == (kind == "clean")][:args.count]
    if kind != "clean":
        members = [replace(m, kind=kind, member_id=m.member_id.replace(m.kind, kind)) for m in members]
    for m in members:
        with manifest.timed(f"train:{m.member_id}"):
            ckpt, partner = train_member(cfg, bundle, m)
        save_checkpoint(ckpt, out / f"{m.member_id}.ck")
        save_checkpoint(partner, out / f"partner-{m.member_id}.ck")
        trigger = member_trigger(cfg, bundle, m)
        if trigger is not None:
            reports.save_trigger(trigger, out / f"{m.member_id}-trigger.bin")
        log.info("%s: val accuracy %.3f, asr %s", m.member_id, ckpt.metadata["val_accuracy"],
                 ckpt.metadata.get("asr"))
    manifest.write(out)
    return EXIT_OK


def cmd_detect(cfg: ExperimentConfig, args) -> int:
    # load everything up front so a bad artifact fails before any computation
    a, b = load_checkpoint(args.model_a), load_checkpoint(args.model_b)
    bundle = load_dataset(args.dataset) if args.dataset else None
    out, manifest = _start(cfg, "detect")
    if bundle is None:
        bundle = make_bundle(cfg)
    with manifest.timed("cross_examine"):
        report = cross_examine(a, b, bundle.detection_clean, replace(cfg.inversion, seed=cfg.seed % 2 ** 32),
                               cfg.screening, cfg.finetune, ids=(Path(args.model_a).stem, Path(args.model_b).stem),
                               pair_id="pair", seed=cfg.seed % 2 ** 16)
    if report.degenerate:
        log.warning("degenerate pair: %s; both verdicts clean", report.degenerate)
    reports.write_pair_report(out, report, cfg.digest())
    manifest.write(out)
    for i, role in enumerate(("a", "b")):
        print(f"{report.model_ids[i]}: {report.models[role].verdict}")
    return EXIT_OK


def _print_metrics(label: str, m) -> None:
    def f(v):
        return "n/a" if v is None else f"{v:.3f}"
    print(f"{label}: DSR {f(m.dsr)}  FPR {f(m.fpr)}  F1 {f(m.f1)}  (tp {m.tp}, fp {m.fp}, tn {m.tn}, fn {m.fn})")


def cmd_population(cfg: ExperimentConfig, args) -> int:
    out, manifest = _start(cfg, "population")
    with manifest.timed("population"):
        result = evaluate_population(cfg)
    reports.write_population_report(out, result)
    manifest.write(out)
    _print_metrics("population", result.metrics)
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    out, manifest = _start(cfg, "ablate")
    with manifest.timed("ablate"):
        results = ablate_similarity_metric(cfg)
    blocks = {}
    for metric, res in results.items():
        reports.write_population_report(out / metric, res)
        blocks[metric] = res.metrics.to_dict()
        _print_metrics(metric, res.metrics)
    reports.dump_json({"label": "ablation", "config_hash": cfg.digest(), "metrics": blocks}, out / "metrics.json")
    plotting.plot_ablation(blocks, out / "figures" / "ablation.png")
    manifest.write(out)
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    out, manifest = _start(cfg, "sweep")
    with manifest.timed("sweep"):
        rows, results = poison_rate_sweep(cfg)
    for rate, res in results.items():
        reports.write_population_report(out / f"rate-{rate:g}", res)
    reports.write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    plotting.plot_sweep([r | {"mean_attack_asr": r["mean_attack_asr"] or 0.0, "f1": r["f1"] or 0.0} for r in rows],
                        out / "figures" / "sweep.png")
    manifest.write(out)
    for r in rows:
        print(f"rate {r['rate']:g}: F1 {r['f1'] if r['f1'] is None else round(r['f1'], 3)}  "
              f"attack ASR {r['mean_attack_asr']:.3f}{'  (degraded)' if r['degraded'] else ''}")
    return EXIT_OK


def cmd_layer_probe(cfg: ExperimentConfig, args) -> int:
    out, manifest = _start(cfg, "layer-probe")
    with manifest.timed("layer_probe"):
        rows = layer_probe_study(cfg, n_seeds=args.seeds)
    reports.write_csv(out / "layers.csv", LAYER_COLUMNS, rows)
    plotting.plot_layer_similarity(rows, out / "figures" / "layers.png")
    manifest.write(out)
    for layer in cfg.population.layers:
        cc = [r["similarity"] for r in rows if r["layer"] == layer and r["pair_type"] == "clean/clean"]
        cb = [r["similarity"] for r in rows if r["layer"] == layer and r["pair_type"] == "clean/backdoored"]
        print(f"{layer}: clean/clean {sum(cc) / len(cc):.3f}  clean/backdoored {sum(cb) / len(cb):.3f}")
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, args) -> int:
    """Re-render figures for an existing report directory."""
    root = Path(args.out or cfg.out_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"report directory {root} does not exist")
    made = []
    for traces in sorted(root.rglob("traces.csv")):
        rows = reports.read_csv(traces)
        if rows:
            made.append(plotting.plot_traces(rows, traces.parent / "figures" / "traces.png"))
    for layers in sorted(root.rglob("layers.csv")):
        rows = [r | {"similarity": float(r["similarity"])} for r in reports.read_csv(layers)]
        made.append(plotting.plot_layer_similarity(rows, layers.parent / "figures" / "layers.png"))
    for sweep in sorted(root.rglob("sweep.csv")):
        rows = [r | {"mean_attack_asr": float(r["mean_attack_asr"] or 0), "f1": float(r["f1"] or 0)}
                for r in reports.read_csv(sweep)]
        made.append(plotting.plot_sweep(rows, sweep.parent / "figures" / "sweep.png"))
    if (root / "manifest.json").exists():
        manifest = RunManifest.read(root / "manifest.json")
        manifest.write(root)
    for p in made:
        print(p)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "detect": cmd_detect, "population": cmd_population, "ablate": cmd_ablate,
            "sweep": cmd_sweep, "layer-probe": cmd_layer_probe, "report": cmd_report}


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides out_dir)")
    common.add_argument("--seed", metavar="U64", type=_u64, help="master seed (overrides the config)")
    common.add_argument("--jobs", metavar="N", type=_positive, help="worker processes for population runs")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="crossexam", description="Cross-examination backdoor detection lab.")
    parser.add_argument("--version", action="version", version=f"crossexam {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common], help="train clean or backdoored model(s) with partners")
    p.add_argument("--kind", choices=("clean", "patch", "blended"))
    p.add_argument("--count", type=_positive, default=1)
    p = sub.add_parser("detect", parents=[common], help="cross-examine two checkpoints")
    p.add_argument("model_a")
    p.add_argument("model_b")
    p.add_argument("--dataset", metavar="LDDS", help="dataset container providing the detection split")
    sub.add_parser("population", parents=[common], help="evaluate a clean/backdoored population")
    sub.add_parser("ablate", parents=[common], help="similarity-metric ablation")
    sub.add_parser("sweep", parents=[common], help="poison-rate sweep")
    p = sub.add_parser("layer-probe", parents=[common], help="CKA per probe layer on triggered data")
    p.add_argument("--seeds", type=_positive, default=3)
    sub.add_parser("report", parents=[common], help="re-render figures of a report directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PopulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.__cause__, NUMERIC_ERRORS) else EXIT_INPUT
    except (CheckpointError, DatasetError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
