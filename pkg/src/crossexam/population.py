"""Population experiments: train clean and backdoored members, cross-examine each
against an independently seeded partner, and aggregate detection metrics."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ExperimentConfig, derive_seed
from .data import (DatasetBundle, PoisonConfig, TriggerSpec, make_synthetic_dataset, make_trigger,
                   poison_dataset, triggered_probe_set)
from .detection import PairReport, PopulationMetrics, ScreeningRule, calibrate_tau, cross_examine
from .inversion import invert_trigger
from .nn import activations
from .similarity import cka
from .training import Checkpoint, evaluate_asr, train_model

log = logging.getLogger(__name__)

LOW_ASR = 0.2  # attacks below this ASR are reported as degraded, not as errors


class PopulationError(RuntimeError):
    def __init__(self, member_id: str, seed: int, cause: BaseException):
        super().__init__(f"population member {member_id} (seed {seed}) failed: {cause}")
        self.member_id, self.seed = member_id, seed


@dataclass(frozen=True)
class Member:
    member_id: str
    kind: str  # clean | patch | blended
    seed: int
    partner_seed: int
    target: int | None = None
    poison_rate: float = 0.0
    trigger_seed: int = 0

    @property
    def truth(self) -> str:
        return "clean" if self.kind == "clean" else "backdoored"


def make_bundle(cfg: ExperimentConfig) -> DatasetBundle:
    d = cfg.dataset
    return make_synthetic_dataset(d.num_classes, d.n, d.channels, d.height, d.width,
                                  seed=derive_seed(cfg.seed, "dataset") % 2 ** 32)


def plan_population(cfg: ExperimentConfig, rate: float | None = None) -> list[Member]:
    """Member list in id order; clean ids do not depend on the poison rate."""
    pc, ac = cfg.population, cfg.attack
    rate = ac.poison_rate if rate is None else rate
    k = cfg.dataset.num_classes
    members = []
    for i in range(pc.n_clean):
        mid = f"clean-{i:02d}"
        members.append(Member(mid, "clean", derive_seed(cfg.seed, "model", mid) % 2 ** 32,
                              derive_seed(cfg.seed, "partner", mid) % 2 ** 32))
    for j in range(pc.n_backdoored):
        kind = ac.kinds[j % len(ac.kinds)]
        mid = f"{kind}-{j:02d}"
        target = ac.target_label if ac.target_label is not None else j % k
        members.append(Member(mid, kind, derive_seed(cfg.seed, "model", mid) % 2 ** 32,
                              derive_seed(cfg.seed, "partner", mid) % 2 ** 32, target, rate,
                              derive_seed(cfg.seed, "trigger", mid) % 2 ** 32))
    return members


def member_trigger(cfg: ExperimentConfig, bundle: DatasetBundle, m: Member) -> TriggerSpec | None:
    if m.kind == "clean":
        return None
    return make_trigger(m.kind, bundle.image_shape, seed=m.trigger_seed, size=tuple(cfg.attack.trigger_size),
                        strength=cfg.attack.blend_strength)


def train_member(cfg: ExperimentConfig, bundle: DatasetBundle, m: Member) -> tuple[Checkpoint, Checkpoint]:
    """(model under test, clean partner)."""
    trigger = member_trigger(cfg, bundle, m)
    if trigger is None:
        ckpt = train_model(bundle, replace(cfg.train, seed=m.seed))
    else:
        poison = PoisonConfig(m.poison_rate, m.target, trigger, seed=m.trigger_seed)
        ckpt = train_model(poison_dataset(bundle, poison), replace(cfg.train, seed=m.seed), trigger=trigger)
    partner = train_model(bundle, replace(cfg.train, seed=m.partner_seed))
    return ckpt, partner


@dataclass
class MemberResult:
    member: Member
    report: PairReport
    attack_asr: float | None
    trigger: TriggerSpec | None

    def detail(self) -> dict:
        mv = self.report.models["a"]
        return {
            "member_id": self.member.member_id,
            "pair_id": self.report.pair_id,
            "kind": self.member.kind,
            "truth": self.member.truth,
            "verdict": mv.verdict,
            "stage1_flag": self.report.stage1_flag,
            "similarity": self.report.similarity,
            "target": mv.target,
            "true_target": self.member.target,
            "asr_before": mv.asr_before,
            "asr_after": mv.asr_after,
            "attack_asr": self.attack_asr,
            "partner_verdict": self.report.models["b"].verdict,
        }


@dataclass
class PopulationResult:
    metrics: PopulationMetrics
    members: list[MemberResult]
    config: ExperimentConfig
    label: str = "population"
    extra: dict = field(default_factory=dict)


def _examine(cfg: ExperimentConfig, bundle: DatasetBundle, m: Member, models=None) -> MemberResult:
    try:
        ckpt, partner = models if models is not None else train_member(cfg, bundle, m)
        trigger = member_trigger(cfg, bundle, m)
        attack_asr = evaluate_asr(ckpt, bundle.detection_clean, trigger, m.target) if trigger is not None else None
        inv_cfg = replace(cfg.inversion, seed=derive_seed(cfg.seed, "inversion", m.member_id) % 2 ** 32)
        report = cross_examine(ckpt, partner, bundle.detection_clean, inv_cfg, cfg.screening, cfg.finetune,
                               ids=(m.member_id, f"partner-{m.member_id}"), pair_id=f"pair-{m.member_id}",
                               seed=derive_seed(cfg.seed, "finetune", m.member_id) % 2 ** 16)
    except Exception as exc:
        raise PopulationError(m.member_id, m.seed, exc) from exc
    log.info("%s (%s): verdict %s", m.member_id, m.kind, report.models["a"].verdict)
    return MemberResult(m, report, attack_asr, trigger)


def _examine_job(args):
    return _examine(*args)


class ModelCache:
    """In-memory cache of trained (model, partner) pairs keyed by member and training
    config, plus finished member results keyed by the full detection config."""

    def __init__(self):
        self._store: dict = {}
        self._results: dict = {}

    def _key(self, cfg: ExperimentConfig, m: Member) -> tuple:
        return (m, repr(cfg.train), repr(cfg.attack), repr(cfg.dataset), cfg.seed)

    def get(self, cfg: ExperimentConfig, bundle: DatasetBundle, m: Member):
        key = self._key(cfg, m)
        if key not in self._store:
            self._store[key] = train_member(cfg, bundle, m)
        return self._store[key]

    def examine(self, cfg: ExperimentConfig, bundle: DatasetBundle, m: Member) -> "MemberResult":
        key = self._key(cfg, m) + (repr(cfg.inversion), repr(cfg.screening), repr(cfg.finetune))
        if key not in self._results:
            self._results[key] = _examine(cfg, bundle, m, self.get(cfg, bundle, m))
        return self._results[key]


def run_members(cfg: ExperimentConfig, bundle: DatasetBundle, members: list[Member], jobs: int = 1,
                cache: ModelCache | None = None) -> list[MemberResult]:
    if jobs > 1 and cache is None:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_examine_job, [(cfg, bundle, m) for m in members]))
    else:
        results = [cache.examine(cfg, bundle, m) if cache else _examine(cfg, bundle, m) for m in members]
    return sorted(results, key=lambda r: r.member.member_id)


def evaluate_population(cfg: ExperimentConfig, jobs: int | None = None, cache: ModelCache | None = None,
                        rate: float | None = None, bundle: DatasetBundle | None = None,
                        label: str = "population") -> PopulationResult:
    bundle = bundle or make_bundle(cfg)
    if cfg.population.calibration_pairs:
        cfg = replace(cfg, screening=calibrate_screening(cfg, cfg.population.calibration_pairs))
    members = plan_population(cfg, rate)
    results = run_members(cfg, bundle, members, jobs or cfg.jobs, cache)
    metrics = PopulationMetrics.from_details([r.detail() for r in results])
    return PopulationResult(metrics, results, cfg, label)


def ablate_similarity_metric(cfg: ExperimentConfig, metrics: list[str] | None = None,
                             jobs: int | None = None, cache: ModelCache | None = None) -> dict[str, PopulationResult]:
    """Rerun the population with the inversion's similarity term swapped per metric.
    Members are trained once and shared across metrics."""
    metrics = metrics or cfg.population.metrics
    bundle = make_bundle(cfg)
    cache = cache if cache is not None else ModelCache()
    out = {}
    for metric in metrics:
        sub = replace(cfg, inversion=replace(cfg.inversion, metric=metric))
        log.info("ablation: metric %s", metric)
        out[metric] = evaluate_population(sub, jobs, cache, bundle=bundle, label=f"ablation-{metric}")
    return out


def poison_rate_sweep(cfg: ExperimentConfig, rates: list[float] | None = None, jobs: int | None = None,
                      cache: ModelCache | None = None) -> tuple[list[dict], dict[float, PopulationResult]]:
    """One population per rate; clean members are shared. Rows carry F1 and the mean
    attack ASR of the backdoored members, with a flag when the attack itself failed."""
    rates = cfg.population.rates if rates is None else rates
    if not rates:
        raise ValueError("poison-rate sweep needs at least one rate")
    if any(not 0.0 < r <= 1.0 for r in rates):
        raise ValueError(f"poison rates must lie in (0, 1], got {rates}")
    bundle = make_bundle(cfg)
    cache = cache if cache is not None else ModelCache()
    rows, results = [], {}
    for rate in rates:
        log.info("sweep: rate %g", rate)
        res = evaluate_population(cfg, jobs, cache, rate=rate, bundle=bundle, label=f"sweep-{rate:g}")
        asrs = [r.attack_asr for r in res.members if r.attack_asr is not None]
        mean_asr = float(np.mean(asrs)) if asrs else None
        degraded = mean_asr is not None and mean_asr < LOW_ASR
        rows.append({"rate": rate, "dsr": res.metrics.dsr, "fpr": res.metrics.fpr, "f1": res.metrics.f1,
                     "mean_attack_asr": mean_asr, "degraded": degraded,
                     "note": "attack ASR below 0.2; detection degradation expected" if degraded else ""})
        results[rate] = res
    return rows, results


def layer_table(pairs: list[tuple[str, str, Checkpoint, Checkpoint]], probe_images: np.ndarray,
                layers: list[str]) -> list[dict]:
    """CKA per probe layer for each (pair_id, pair_type, model_a, model_b)."""
    rows = []
    for pair_id, pair_type, a, b in pairs:
        ma, mb = a.model(), b.model()
        known = set(ma.spec.probe_names())
        for layer in layers:
            if layer not in known:
                raise KeyError(f"unknown probe layer {layer!r}; declared: {sorted(known)}")
            sim = cka(activations(ma, probe_images, layer), activations(mb, probe_images, layer))
            rows.append({"pair_id": pair_id, "pair_type": pair_type, "layer": layer, "similarity": sim})
    return rows


def layer_probe_study(cfg: ExperimentConfig, n_seeds: int = 3, kind: str = "patch") -> list[dict]:
    """For each seed: a clean reference model is compared with an independent clean
    model and with a backdoored model, on probe data where a fraction of the
    detection samples carries the true trigger."""
    bundle = make_bundle(cfg)
    rows = []
    for s in range(n_seeds):
        ref = train_model(bundle, replace(cfg.train, seed=derive_seed(cfg.seed, "layers", s, "ref") % 2 ** 32))
        other = train_model(bundle, replace(cfg.train, seed=derive_seed(cfg.seed, "layers", s, "clean") % 2 ** 32))
        tseed = derive_seed(cfg.seed, "layers", s, "trigger") % 2 ** 32
        target = s % cfg.dataset.num_classes
        trigger = make_trigger(kind, bundle.image_shape, seed=tseed, size=tuple(cfg.attack.trigger_size),
                               strength=cfg.attack.blend_strength)
        poisoned = poison_dataset(bundle, PoisonConfig(cfg.attack.poison_rate, target, trigger, seed=tseed))
        bd = train_model(poisoned, replace(cfg.train, seed=derive_seed(cfg.seed, "layers", s, "bd") % 2 ** 32),
                         trigger=trigger)
        probe = triggered_probe_set(bundle.detection_clean, trigger, target, cfg.population.probe_fraction, seed=tseed)
        table = layer_table([(f"seed{s}-cc", "clean/clean", ref, other), (f"seed{s}-cb", "clean/backdoored", ref, bd)],
                            probe, cfg.population.layers)
        for r in table:
            r["seed"] = s
            r["attack_asr"] = bd.metadata.get("asr")
        rows += table
    return rows


def calibrate_screening(cfg: ExperimentConfig, n_pairs: int = 5) -> ScreeningRule:
    """Set tau from the reversed-trigger similarity of ``n_pairs`` held-out clean pairs."""
    bundle = make_bundle(cfg)
    sims = []
    for i in range(n_pairs):
        a = train_model(bundle, replace(cfg.train, seed=derive_seed(cfg.seed, "calibration", i, "a") % 2 ** 32))
        b = train_model(bundle, replace(cfg.train, seed=derive_seed(cfg.seed, "calibration", i, "b") % 2 ** 32))
        inv_cfg = replace(cfg.inversion, seed=derive_seed(cfg.seed, "calibration", i) % 2 ** 32)
        sims.append(invert_trigger(a, b, bundle.detection_clean, inv_cfg).final_similarity)
    return replace(cfg.screening, cka_threshold=calibrate_tau(sims))
