"""Report figures. Everything renders off-screen to PNG files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "svg.hashsalt": "crossexam",
}
TERMS = ("loss_cos", "loss_od", "loss_reg", "loss_bias", "loss_uniformity", "total")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_traces(rows: list[dict], path) -> Path:
    """One panel per loss term; one line per (pair, direction) from traces.csv rows."""
    runs: dict[str, dict[str, list]] = {}
    for r in rows:
        key = f"{r['pair']}:{r['examined']}"
        run = runs.setdefault(key, {t: [] for t in TERMS} | {"epoch": []})
        run["epoch"].append(int(r["epoch"]))
        for t in TERMS:
            run[t].append(float(r[t]))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 3, figsize=(10, 5.5), sharex=True)
        for ax, term in zip(axes.flat, TERMS):
            for key in sorted(runs):
                ax.plot(runs[key]["epoch"], runs[key][term], lw=0.8, alpha=0.7)
            ax.set_title(term)
        for ax in axes[-1]:
            ax.set_xlabel("epoch")
        fig.tight_layout()
        return _save(fig, path)


def plot_layer_similarity(table: list[dict], path) -> Path:
    """Mean similarity per probe layer for each pair type."""
    layers = list(dict.fromkeys(r["layer"] for r in table))
    kinds = list(dict.fromkeys(r["pair_type"] for r in table))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for kind in kinds:
            means = []
            for layer in layers:
                vals = [r["similarity"] for r in table if r["layer"] == layer and r["pair_type"] == kind]
                means.append(sum(vals) / len(vals))
            ax.plot(layers, means, marker="o", label=kind)
        ax.set_ylim(0, 1.02)
        ax.set_ylabel("CKA on triggered probe data")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_sweep(rows: list[dict], path) -> Path:
    """F1 and mean attack ASR against poison rate."""
    rates = [float(r["rate"]) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(rates, [float(r["f1"]) for r in rows], marker="o", label="F1")
        ax.plot(rates, [float(r["mean_attack_asr"]) for r in rows], marker="s", ls="--", label="attack ASR")
        ax.set_xscale("log")
        ax.set_xlabel("poison rate")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_ablation(scores: dict[str, dict], path) -> Path:
    """Grouped bars of DSR, FPR and F1 per similarity metric."""
    names = list(scores)
    fields = ("dsr", "fpr", "f1")
    width = 0.8 / len(fields)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        for j, f in enumerate(fields):
            vals = [scores[m].get(f) or 0.0 for m in names]
            ax.bar([i + (j - 1) * width for i in range(len(names))], vals, width, label=f.upper())
        ax.set_xticks(range(len(names)), [m.upper() for m in names])
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False, ncol=3)
        fig.tight_layout()
        return _save(fig, path)
