"""Cross-model trigger inversion.

A trigger (mask, pattern) is optimised against a pair of models so that the
examined model's output concentrates while its representation drifts away
from the partner model's, under a sparsity penalty on the trigger.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Split, TriggerSpec, apply_trigger
from .nn import Model, activations, predict
from .optim import AdamState, adam_step
from .similarity import METRICS, similarity, similarity_loss
from .training import Checkpoint

log = logging.getLogger(__name__)


class UnsupportedParadigm(ValueError):
    pass


class InversionDiverged(FloatingPointError):
    def __init__(self, epoch: int, terms: dict):
        detail = ", ".join(f"{k}={v}" for k, v in terms.items())
        super().__init__(f"non-finite inversion loss at epoch {epoch} ({detail})")
        self.epoch = epoch
        self.terms = terms


# ---- loss terms ----------------------------------------------------------------

def bias_loss(logits: Tensor) -> Tensor:
    """1 - mean over the batch of the largest softmax probability."""
    return 1.0 - ad.mean(ad.tmax(ad.softmax(logits), axis=1))


def uniformity_loss(logits: Tensor) -> Tensor:
    """Negative entropy of the batch-mean prediction, normalised by ln K to [-1, 0]."""
    k = logits.shape[1]
    p = ad.mean(ad.softmax(logits), axis=0)
    p = ad.add(p, 1e-12)
    return ad.tsum(ad.mul(p, ad.log(p))) * (1.0 / math.log(k))


def concentration_loss(logits: Tensor) -> Tensor:
    """Entropy of the batch-mean prediction over ln K, in [0, 1]; zero when every sample gets one label."""
    return 1.0 + uniformity_loss(logits)


def output_distribution_loss(outputs: Tensor, paradigm: str = "SL", target: int | None = None,
                             reference: Tensor | None = None) -> Tensor:
    """Output-distribution term.

    SL with ``target``: cross-entropy towards the target label (zero when the
    batch is confidently classified as the target). SL without target: the
    batch-mean concentration surrogate. SSL: mean cosine distance between the
    embeddings and the reference embedding, zero when they coincide.
    """
    if paradigm == "SL":
        if target is not None:
            return ad.cross_entropy(outputs, np.full(outputs.shape[0], int(target)))
        return concentration_loss(outputs)
    if paradigm == "SSL":
        if reference is None:
            raise ValueError("SSL output-distribution loss needs a reference embedding")
        ref = reference if isinstance(reference, Tensor) else Tensor(reference)
        if ref.ndim == 1:
            ref = ad.broadcast_batch(ref, outputs.shape[0])
        dot = ad.tsum(ad.mul(outputs, ref), axis=1)
        nx = ad.sqrt(ad.add(ad.tsum(ad.mul(outputs, outputs), axis=1), 1e-12))
        nr = ad.sqrt(ad.add(ad.tsum(ad.mul(ref, ref), axis=1), 1e-12))
        cos = ad.mul(dot, ad.power(ad.mul(nx, nr), -1.0))
        return 1.0 - ad.mean(cos)
    raise UnsupportedParadigm(f"paradigm {paradigm!r} is not supported (SL and SSL only)")


def regularization_loss(mask: Tensor, pattern: Tensor, norm: str = "L1") -> Tensor:
    """L1: |m|_1 + |p|_1. L2: Euclidean norm of the mask alone."""
    if norm == "L1":
        return ad.tsum(ad.tabs(mask)) + ad.tsum(ad.tabs(pattern))
    if norm == "L2":
        return ad.sqrt(ad.add(ad.tsum(ad.mul(mask, mask)), 1e-12))
    raise ValueError(f"reg_norm must be 'L1' or 'L2', got {norm!r}")


def trigger_norm(trigger: TriggerSpec, norm: str = "L1") -> float:
    return regularization_loss(Tensor(trigger.mask), Tensor(trigger.pattern), norm).item()


# ---- configuration and result --------------------------------------------------

TARGET_SEARCH = ("none", "sweep", "pilot")


@dataclass
class InversionConfig:
    weight_cka: float = 1.0
    weight_od: float = 1.0
    weight_reg: float = 0.03
    reg_norm: str = "L1"
    epochs: int = 200
    lr: float = 0.1
    lr_decay: float = 0.5
    num_probe_samples: int = 1000
    probe_layer: str = "layer4"
    batch_size: int = 256
    asr_target: float = 0.9
    patience: int = 200
    seed: int = 0
    metric: str = "cka"
    paradigm: str = "SL"
    target: int | None = None
    target_search: str = "pilot"
    pilot_epochs: int = 10

    def __post_init__(self):
        for name in ("weight_cka", "weight_od", "weight_reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.weight_cka <= 0 and self.weight_od <= 0:
            raise ValueError("at least one of weight_cka, weight_od must be > 0")
        if self.reg_norm not in ("L1", "L2"):
            raise ValueError(f"reg_norm must be 'L1' or 'L2', got {self.reg_norm!r}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.epochs < 1 or self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("epochs >= 1, lr > 0 and lr_decay in (0, 1] are required")
        if self.target_search not in TARGET_SEARCH:
            raise ValueError(f"target_search must be one of {TARGET_SEARCH}, got {self.target_search!r}")
        if self.pilot_epochs < 1:
            raise ValueError(f"pilot_epochs must be >= 1, got {self.pilot_epochs}")
        if self.paradigm not in ("SL", "SSL"):
            raise UnsupportedParadigm(f"paradigm {self.paradigm!r} is not supported (SL and SSL only)")

    def lr_at(self, epoch: int) -> float:
        """Step decay: multiply by ``lr_decay`` every ceil(epochs / 3) epochs (epoch is 1-based)."""
        period = max(1, math.ceil(self.epochs / 3))
        return self.lr * self.lr_decay ** ((epoch - 1) // period)


REG_IMPROVEMENT = 0.005  # relative drop in loss_reg that resets the patience counter
TRACE_KEYS = ("loss_cos", "loss_od", "loss_reg", "loss_bias", "loss_uniformity", "total")


@dataclass
class InversionResult:
    trigger: TriggerSpec
    traces: dict[str, list[float]]
    final_similarity: float
    target: int
    asr: dict[str, list[float]]  # model role -> ASR per candidate label
    stopped_early: bool
    best_epoch: int
    epochs_run: int
    metric: str = "cka"
    per_target: list[dict] = field(default_factory=list)

    def asr_at_target(self, role: str) -> float:
        return self.asr[role][self.target]

    def summary(self) -> dict:
        return {
            "target": self.target,
            "final_similarity": self.final_similarity,
            "metric": self.metric,
            "asr": self.asr,
            "stopped_early": self.stopped_early,
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
            "mask_l1": float(np.abs(self.trigger.mask).sum()),
        }


# ---- optimisation ----------------------------------------------------------------

def _sigmoid(u: np.ndarray) -> np.ndarray:
    return (1.0 / (1.0 + np.exp(-u))).astype(np.float32)


def asr_per_label(model: Model, images: np.ndarray, labels: np.ndarray, trigger: TriggerSpec,
                  num_classes: int) -> list[float]:
    """Reversed-trigger ASR for every candidate target label (samples of that label excluded)."""
    preds = predict(model, apply_trigger(images, trigger))
    out = []
    for c in range(num_classes):
        keep = labels != c
        out.append(float(np.mean(preds[keep] == c)) if keep.any() else 0.0)
    return out


def _as_model(m) -> Model:
    return m.model() if isinstance(m, Checkpoint) else m


def _probe_split(probe: Split, cfg: InversionConfig) -> Split:
    if len(probe) <= cfg.num_probe_samples:
        return probe
    rng = np.random.default_rng([cfg.seed, 7])
    return probe.subset(np.sort(rng.choice(len(probe), cfg.num_probe_samples, replace=False)))


def invert_trigger(model_a, model_b, probe_data: Split, cfg: InversionConfig | None = None) -> InversionResult:
    """Reverse-engineer a trigger on ``model_a`` using ``model_b`` as the reference.

    When ``cfg.target`` is None the target label is searched for:
    ``sweep`` makes a full run per class and keeps the lowest best total,
    ``pilot`` makes a short run per class and then a full run for the winner,
    ``none`` runs untargeted with the concentration surrogate.
    """
    cfg = cfg or InversionConfig()
    a, b = _as_model(model_a), _as_model(model_b)
    if a.spec.input_shape != b.spec.input_shape:
        raise ValueError(f"models disagree on input shape: {a.spec.input_shape} vs {b.spec.input_shape}")
    probe = _probe_split(probe_data, cfg)
    if cfg.target is not None or cfg.target_search == "none":
        return _invert(a, b, probe, cfg)
    epochs = cfg.epochs if cfg.target_search == "sweep" else min(cfg.pilot_epochs, cfg.epochs)
    runs = [_invert(a, b, probe, replace(cfg, target=c, epochs=epochs)) for c in range(a.spec.output_dim)]
    best = min(range(len(runs)), key=lambda i: (min(runs[i].traces["total"]), i))
    per_target = [{"target": c, "best_total": min(r.traces["total"]), **r.summary()} for c, r in enumerate(runs)]
    result = runs[best] if cfg.target_search == "sweep" else _invert(a, b, probe, replace(cfg, target=best))
    result.per_target = per_target
    return result


def _invert(a: Model, b: Model, probe: Split, cfg: InversionConfig) -> InversionResult:
    c, h, w = a.spec.input_shape
    k = a.spec.output_dim
    rng = np.random.default_rng([cfg.seed, 11])
    u_mask = Tensor(rng.normal(-3.0, 0.1, size=(h, w)), requires_grad=True, name="u_mask")
    u_pattern = Tensor(rng.normal(0.0, 1.0, size=(c, h, w)), requires_grad=True, name="u_pattern")
    params = {"u_mask": u_mask, "u_pattern": u_pattern}
    state = AdamState()
    frozen = [p for m in (a, b) for p in m.params.values()]
    saved_flags = [p.requires_grad for p in frozen]
    for p in frozen:
        p.requires_grad = False
        p._tracked = False

    traces = {key: [] for key in TRACE_KEYS}
    best_total, best_epoch = np.inf, 0
    best_u = (u_mask.data.copy(), u_pattern.data.copy())
    best_reg, stale = np.inf, 0
    stopped = False
    n = len(probe)
    epoch = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            lr = cfg.lr_at(epoch)
            order = rng.permutation(n)
            sums = dict.fromkeys(TRACE_KEYS, 0.0)
            hits = np.zeros((2, k))
            counted = np.zeros(k)
            for start in range(0, n, cfg.batch_size):
                idx = np.sort(order[start:start + cfg.batch_size])
                if len(idx) < 2:
                    continue
                terms, preds = _step(a, b, probe.images[idx], u_mask, u_pattern, cfg)
                if not all(np.isfinite(v) for v in terms.values()):
                    raise InversionDiverged(epoch, terms)
                adam_step(params, {key: t.grad for key, t in params.items()}, state, lr)
                for key in TRACE_KEYS:
                    sums[key] += terms[key] * len(idx)
                labels = probe.labels[idx]
                for c in range(k):
                    keep = labels != c
                    hits[:, c] += np.sum(preds[:, keep] == c, axis=1)
                    counted[c] += keep.sum()
            for key in TRACE_KEYS:
                traces[key].append(sums[key] / n)
            total = traces["total"][-1]
            if total < best_total:
                best_total, best_epoch = total, epoch
                best_u = (u_mask.data.copy(), u_pattern.data.copy())
            # patience only runs while the trigger already works on one of the models
            epoch_asr = hits / np.maximum(counted, 1)
            reached = epoch_asr[:, cfg.target].max() if cfg.target is not None else epoch_asr.max()
            if reached >= cfg.asr_target:
                reg = traces["loss_reg"][-1]
                if reg < best_reg - REG_IMPROVEMENT * abs(best_reg):
                    best_reg, stale = reg, 0
                else:
                    stale += 1
                if stale >= cfg.patience:
                    stopped = True
                    break
    finally:
        for p, flag in zip(frozen, saved_flags):
            p.requires_grad = flag
            p._tracked = flag

    trigger = TriggerSpec(_sigmoid(best_u[0]), _sigmoid(best_u[1]), "reversed")
    asr_a = asr_per_label(a, probe.images, probe.labels, trigger, k)
    asr_b = asr_per_label(b, probe.images, probe.labels, trigger, k)
    target = cfg.target if cfg.target is not None else _dominant_label(a, probe, trigger, asr_a)
    triggered = apply_trigger(probe.images, trigger)
    final_sim = similarity(cfg.metric, activations(a, triggered, cfg.probe_layer),
                           activations(b, triggered, cfg.probe_layer))
    return InversionResult(trigger=trigger, traces=traces, final_similarity=final_sim, target=int(target),
                           asr={"a": asr_a, "b": asr_b}, stopped_early=stopped, best_epoch=best_epoch,
                           epochs_run=epoch, metric=cfg.metric)


def _dominant_label(model: Model, probe: Split, trigger: TriggerSpec, asr: list[float]) -> int:
    return int(np.argmax(asr))


def _step(a: Model, b: Model, images: np.ndarray, u_mask: Tensor, u_pattern: Tensor,
          cfg: InversionConfig) -> tuple[dict[str, float], np.ndarray]:
    """One gradient evaluation; returns the loss terms and the predictions of both models."""
    with Tape() as tape:
        mask = ad.sigmoid(u_mask)
        pattern = ad.sigmoid(u_pattern)
        x = ad.blend(mask, pattern, Tensor(images))
        logits_a, probes_a = a.forward(x, probes=(cfg.probe_layer,))
        logits_b, probes_b = b.forward(x, probes=(cfg.probe_layer,))
        sim_loss = similarity_loss(cfg.metric, probes_a[cfg.probe_layer], probes_b[cfg.probe_layer])
        od = output_distribution_loss(logits_a, cfg.paradigm, cfg.target,
                                      reference=logits_b if cfg.paradigm == "SSL" else None)
        bias = bias_loss(logits_a)
        unif = uniformity_loss(logits_b)
        reg = regularization_loss(mask, pattern, cfg.reg_norm)
        total = sim_loss * cfg.weight_cka + (od + bias + unif) * cfg.weight_od + reg * cfg.weight_reg
    tape.backward(total)
    terms = {"loss_cos": sim_loss.item(), "loss_od": od.item(), "loss_reg": reg.item(), "loss_bias": bias.item(),
             "loss_uniformity": unif.item(), "total": total.item()}
    return terms, np.stack([logits_a.data.argmax(axis=1), logits_b.data.argmax(axis=1)])
