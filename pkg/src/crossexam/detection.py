"""Two-stage cross-examination of a model pair.

Stage 1 reverses a trigger on each model with the other one as reference and
screens the pair. Stage 2 fine-tunes every model of a suspect pair on the
verifier's clean data and flags the models whose reversed-trigger ASR falls
by more than the drop threshold.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Split, TriggerSpec, noise_patch_copies
from .inversion import InversionConfig, InversionResult, invert_trigger
from .training import Checkpoint, evaluate_accuracy, evaluate_asr, fine_tune

log = logging.getLogger(__name__)

ROLES = ("a", "b")


@dataclass
class ScreeningRule:
    """A pair is suspect iff some reversed ASR reaches ``asr_threshold`` or the
    similarity under the reversed trigger is at most ``cka_threshold``."""
    asr_threshold: float = 0.75
    cka_threshold: float = 0.5

    def __post_init__(self):
        for name in ("asr_threshold", "cka_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    def is_suspect(self, reversed_asr, similarity: float) -> bool:
        return max(reversed_asr) >= self.asr_threshold or similarity <= self.cka_threshold


def calibrate_tau(clean_pair_similarities, margin: float = 0.1, lo: float = 0.3, hi: float = 0.7) -> float:
    """tau = min clean-pair similarity minus ``margin``, clamped to [lo, hi]."""
    sims = list(clean_pair_similarities)
    if not sims:
        raise ValueError("calibration needs at least one clean pair")
    return float(min(max(min(sims) - margin, lo), hi))


@dataclass
class FineTuneConfig:
    """Stage-2 fine-tuning. ``noise_patch`` adds ``copies`` patch-stamped copies of
    the clean data (labels kept); the ASR after fine-tuning is averaged over
    ``repeats`` independently seeded runs."""
    epochs: int = 3
    lr: float | None = 7e-4  # None: the checkpoint's training lr / 10
    batch_size: int | None = 32
    augment: str = "noise_patch"
    copies: int = 2
    repeats: int = 3
    drop_threshold: float = 0.2

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr is not None and not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.augment not in ("none", "noise_patch"):
            raise ValueError(f"augment must be 'none' or 'noise_patch', got {self.augment!r}")
        if self.copies < 1 or self.repeats < 1:
            raise ValueError("copies and repeats must be >= 1")
        if not 0.0 <= self.drop_threshold <= 1.0:
            raise ValueError(f"drop_threshold must be in [0, 1], got {self.drop_threshold}")


def finetune_set(clean: Split, ft: FineTuneConfig, seed: int) -> Split:
    if ft.augment == "none":
        return clean
    parts = [clean] + [noise_patch_copies(clean, seed * 1000 + i) for i in range(ft.copies)]
    return Split(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))


def sensitivity(ckpt: Checkpoint, clean: Split, trigger: TriggerSpec, target: int, ft: FineTuneConfig,
                seed: int = 0) -> dict:
    """ASR of ``trigger`` and clean accuracy before and after stage-2 fine-tuning."""
    before = evaluate_asr(ckpt, clean, trigger, target)
    after, acc = [], []
    for r in range(ft.repeats):
        tuned = fine_tune(ckpt, finetune_set(clean, ft, seed + r), epochs=ft.epochs, lr=ft.lr,
                          batch_size=ft.batch_size, seed=seed + r)
        after.append(evaluate_asr(tuned, clean, trigger, target))
        acc.append(evaluate_accuracy(tuned, clean))
    return {"asr_before": before, "asr_after": float(np.mean(after)),
            "accuracy_before": evaluate_accuracy(ckpt, clean), "accuracy_after": float(np.mean(acc))}


def render_verdict(stage1_flag: bool, asr_before: float, asr_after: float | None, drop_threshold: float) -> str:
    if not stage1_flag or asr_after is None:
        return "clean"
    return "backdoored" if asr_before - asr_after > drop_threshold else "clean"


@dataclass
class ModelVerdict:
    model_id: str
    target: int | None
    asr_before: float | None
    asr_after: float | None
    accuracy_before: float | None = None
    accuracy_after: float | None = None
    mask_l1: float | None = None
    verdict: str = "clean"

    @property
    def asr_drop(self) -> float | None:
        if self.asr_before is None or self.asr_after is None:
            return None
        return self.asr_before - self.asr_after


@dataclass
class PairReport:
    pair_id: str
    model_ids: tuple[str, str]
    stage1_flag: bool
    similarity: float | None
    models: dict[str, ModelVerdict]
    inversions: dict[str, InversionResult] = field(default_factory=dict)
    degenerate: str | None = None

    @property
    def finetuned(self) -> bool:
        return any(m.asr_after is not None for m in self.models.values())

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "model_ids": list(self.model_ids),
            "stage1_flag": self.stage1_flag,
            "similarity": self.similarity,
            "degenerate": self.degenerate,
            "finetuned": self.finetuned,
            "models": {r: {**vars(m), "asr_drop": m.asr_drop} for r, m in self.models.items()},
            "inversions": {r: inv.summary() for r, inv in self.inversions.items()},
        }


def same_model(a: Checkpoint, b: Checkpoint) -> bool:
    return (a.spec.to_dict() == b.spec.to_dict() and a.params.keys() == b.params.keys()
            and all(np.array_equal(a.params[k], b.params[k]) for k in a.params))


def cross_examine(model_a: Checkpoint, model_b: Checkpoint, clean: Split, inv_cfg: InversionConfig | None = None,
                  rule: ScreeningRule | None = None, ft: FineTuneConfig | None = None,
                  ids: tuple[str, str] = ("a", "b"), pair_id: str = "pair", seed: int = 0) -> PairReport:
    """Run both stages on a pair using the verifier's clean samples ``clean``."""
    inv_cfg = inv_cfg or InversionConfig()
    rule = rule or ScreeningRule()
    ft = ft or FineTuneConfig()
    if len(clean) == 0:
        raise ValueError(f"{pair_id}: detection split is empty")
    if model_a.spec.input_shape != model_b.spec.input_shape or model_a.spec.output_dim != model_b.spec.output_dim:
        raise ValueError(f"{pair_id}: models disagree on input/output spaces")
    if same_model(model_a, model_b):
        models = {r: ModelVerdict(i, None, None, None) for r, i in zip(ROLES, ids)}
        return PairReport(pair_id, ids, False, None, models, degenerate="identical models")

    ckpts = dict(zip(ROLES, (model_a, model_b)))
    inversions = {
        "a": invert_trigger(model_a, model_b, clean, inv_cfg),
        "b": invert_trigger(model_b, model_a, clean, inv_cfg),
    }
    asr_before = {r: inv.asr_at_target("a") for r, inv in inversions.items()}
    sim = min(inv.final_similarity for inv in inversions.values())
    flag = rule.is_suspect(asr_before.values(), sim)
    log.info("%s stage 1: asr %s, similarity %.3f, suspect=%s", pair_id,
             {r: round(v, 3) for r, v in asr_before.items()}, sim, flag)

    models = {}
    for k, (role, model_id) in enumerate(zip(ROLES, ids)):
        inv = inversions[role]
        mv = ModelVerdict(model_id, inv.target, asr_before[role], None, mask_l1=float(inv.trigger.mask.sum()))
        if flag:
            log.info("%s stage 2: fine-tuning %s", pair_id, model_id)
            s = sensitivity(ckpts[role], clean, inv.trigger, inv.target, ft, seed=seed * 2 + k)
            mv.asr_before, mv.asr_after = s["asr_before"], s["asr_after"]
            mv.accuracy_before, mv.accuracy_after = s["accuracy_before"], s["accuracy_after"]
        mv.verdict = render_verdict(flag, mv.asr_before, mv.asr_after, ft.drop_threshold)
        models[role] = mv
    return PairReport(pair_id, ids, flag, sim, models, inversions)


def replay_verdicts(report: PairReport, rule: ScreeningRule, drop_threshold: float) -> dict[str, str]:
    """Recompute the verdicts of a stored report from its recorded evidence."""
    if report.degenerate:
        return {r: "clean" for r in report.models}
    flag = rule.is_suspect([m.asr_before for m in report.models.values()], report.similarity)
    return {r: render_verdict(flag, m.asr_before, m.asr_after, drop_threshold) for r, m in report.models.items()}


# ---- population scoring ----------------------------------------------------------

@dataclass
class PopulationMetrics:
    """Detection rates over models under test; ``backdoored`` is the positive class."""
    dsr: float | None
    fpr: float | None
    f1: float | None
    precision: float | None
    recall: float | None
    tp: int
    fp: int
    tn: int
    fn: int
    n_clean: int
    n_backdoored: int
    details: list[dict] = field(default_factory=list)

    @classmethod
    def from_details(cls, details: list[dict]) -> "PopulationMetrics":
        """Each detail row needs ``truth`` and ``verdict`` in {'clean', 'backdoored'}."""
        tp = sum(d["truth"] == "backdoored" and d["verdict"] == "backdoored" for d in details)
        fn = sum(d["truth"] == "backdoored" and d["verdict"] != "backdoored" for d in details)
        fp = sum(d["truth"] == "clean" and d["verdict"] == "backdoored" for d in details)
        tn = sum(d["truth"] == "clean" and d["verdict"] != "backdoored" for d in details)
        pos, neg = tp + fn, fp + tn
        dsr = tp / pos if pos else None
        fpr = fp / neg if neg else None
        precision = tp / (tp + fp) if tp + fp else None
        recall = dsr
        if pos == 0:
            f1 = None
        elif tp == 0:
            f1 = 0.0
        else:
            f1 = 2 * precision * recall / (precision + recall)
        return cls(dsr, fpr, f1, precision, recall, tp, fp, tn, fn, neg, pos, list(details))

    def to_dict(self) -> dict:
        return dict(vars(self))
