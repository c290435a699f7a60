"""Report directories: metrics.json, pairs.csv, traces.csv, triggers/*.bin and figures."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import plotting
from .data import TriggerSpec
from .detection import PairReport
from .inversion import TRACE_KEYS, InversionConfig, InversionResult
from .training import CheckpointError, decode_tensors, encode_tensor

PAIR_COLUMNS = ("pair_id", "model_a", "model_b", "stage1_flag", "similarity", "degenerate",
                "target_a", "asr_before_a", "asr_after_a", "verdict_a",
                "target_b", "asr_before_b", "asr_after_b", "verdict_b")
TRACE_COLUMNS = ("pair", "examined", "epoch") + TRACE_KEYS


def _plain(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"cannot serialise {type(x).__name__}")


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_plain) + "\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---- triggers ---------------------------------------------------------------------

def trigger_bytes(trigger: TriggerSpec) -> bytes:
    return encode_tensor("mask", trigger.mask) + encode_tensor("pattern", trigger.pattern)


def save_trigger(trigger: TriggerSpec, path) -> None:
    Path(path).write_bytes(trigger_bytes(trigger))


def load_trigger(path, kind: str = "reversed") -> TriggerSpec:
    tensors = decode_tensors(Path(path).read_bytes(), source=str(path))
    if set(tensors) != {"mask", "pattern"}:
        raise CheckpointError(f"{path}: expected tensors 'mask' and 'pattern', found {sorted(tensors)}")
    return TriggerSpec(tensors["mask"], tensors["pattern"], kind)


def write_inversion(result: InversionResult, cfg: InversionConfig, out) -> Path:
    """inversion.json (config, traces, metrics) plus trigger.bin."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json({"config": asdict(cfg), "traces": result.traces, "metrics": result.summary(),
               "per_target": result.per_target}, out / "inversion.json")
    save_trigger(result.trigger, out / "trigger.bin")
    return out


# ---- pair and population reports ------------------------------------------------

def pair_row(report: PairReport) -> dict:
    row = {"pair_id": report.pair_id, "model_a": report.model_ids[0], "model_b": report.model_ids[1],
           "stage1_flag": report.stage1_flag, "similarity": report.similarity, "degenerate": report.degenerate}
    for role, mv in report.models.items():
        row.update({f"target_{role}": mv.target, f"asr_before_{role}": mv.asr_before,
                    f"asr_after_{role}": mv.asr_after, f"verdict_{role}": mv.verdict})
    return row


def trace_rows(report: PairReport) -> list[dict]:
    rows = []
    for role, inv in report.inversions.items():
        examined = report.model_ids[0] if role == "a" else report.model_ids[1]
        for e in range(len(inv.traces["total"])):
            rows.append({"pair": report.pair_id, "examined": examined, "epoch": e + 1,
                         **{k: inv.traces[k][e] for k in TRACE_KEYS}})
    return rows


def write_pairs(out, reports: list[PairReport], figures: bool = True) -> None:
    out = Path(out)
    (out / "triggers").mkdir(parents=True, exist_ok=True)
    write_csv(out / "pairs.csv", PAIR_COLUMNS, [pair_row(r) for r in reports])
    traces = [row for r in reports for row in trace_rows(r)]
    write_csv(out / "traces.csv", TRACE_COLUMNS, traces)
    for r in reports:
        for role, inv in r.inversions.items():
            save_trigger(inv.trigger, out / "triggers" / f"{r.pair_id}-{role}.bin")
    if figures and traces:
        plotting.plot_traces(traces, out / "figures" / "traces.png")


def write_population_report(out, result, extra: dict | None = None, figures: bool = True) -> Path:
    """``result`` is a population.PopulationResult."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"label": result.label, "config_hash": result.config.digest(), "metrics": result.metrics.to_dict(),
           "pairs": [m.report.to_dict() for m in result.members], "screening": asdict(result.config.screening)}
    if extra:
        doc.update(extra)
    dump_json(doc, out / "metrics.json")
    write_pairs(out, [m.report for m in result.members], figures)
    return out


def write_pair_report(out, report: PairReport, config_hash: str, figures: bool = True) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json({"label": "detect", "config_hash": config_hash, "pair": report.to_dict(),
               "verdicts": {report.model_ids[i]: report.models[r].verdict for i, r in enumerate(("a", "b"))}},
              out / "metrics.json")
    write_pairs(out, [report], figures)
    return out
