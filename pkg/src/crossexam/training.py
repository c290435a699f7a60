"""Training, fine-tuning and evaluation of desk classifiers, plus the LDCK checkpoint format."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import DatasetBundle, Split, TriggerSpec, apply_trigger
from .nn import Model, ModelSpec, desk_cnn, predict
from .optim import AdamState, NonFiniteGradient, adam_step

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}{': ' + detail if detail else ''}")
        self.epoch = epoch


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 3e-3
    optimizer: str = "adam"
    seed: int = 0
    hidden: int = 64

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.optimizer != "adam":
            raise ValueError(f"optimizer must be 'adam', got {self.optimizer!r}")


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def model(self) -> Model:
        return Model(self.spec, {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()})

    @classmethod
    def from_model(cls, model: Model, metadata: dict) -> "Checkpoint":
        return cls(model.spec, {k: t.data.copy() for k, t in model.params.items()}, metadata)


def _run_epochs(model: Model, split: Split, epochs: int, batch_size: int, lr: float, rng: np.random.Generator,
                state: AdamState, on_epoch=None) -> list[float]:
    losses = []
    params = model.params
    n = len(split)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            with Tape() as tape:
                logits, _ = model.forward(split.images[idx], probes=())
                loss = ad.cross_entropy(logits, split.labels[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, "loss is not finite")
            tape.backward(loss)
            try:
                adam_step(params, {k: p.grad for k, p in params.items()}, state, lr)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc
            total += value * len(idx)
            seen += len(idx)
        losses.append(total / seen)
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    return losses


def train_model(bundle: DatasetBundle, cfg: TrainConfig, poison: dict | None = None,
                trigger: TriggerSpec | None = None) -> Checkpoint:
    """Train the desk CNN on ``bundle.train`` with mini-batch Adam and cross-entropy.

    ``poison`` and ``trigger`` only annotate the checkpoint (the poisoned samples are
    already in the bundle); when given, the final ASR is recorded as well.
    """
    if len(bundle.train) == 0:
        raise ValueError("training split is empty")
    spec = desk_cnn(bundle.num_classes, bundle.image_shape, cfg.hidden)
    model = Model.initialise(spec, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    history: dict[str, list[float]] = {"train_loss": [], "val_accuracy": []}

    def record(epoch, loss):
        history["train_loss"].append(loss)
        history["val_accuracy"].append(_accuracy(model, bundle.val) if len(bundle.val) else float("nan"))
        log.debug("epoch %d loss %.4f val %.3f", epoch, loss, history["val_accuracy"][-1])

    _run_epochs(model, bundle.train, cfg.epochs, cfg.batch_size, cfg.lr, rng, AdamState(), record)
    meta = {
        "seed": cfg.seed,
        "train_config": asdict(cfg),
        "poison": poison if poison is not None else bundle.poison,
        "history": history,
        "val_accuracy": history["val_accuracy"][-1],
    }
    ckpt = Checkpoint.from_model(model, meta)
    if trigger is not None and meta["poison"]:
        meta["trigger_kind"] = trigger.kind
        meta["asr"] = evaluate_asr(ckpt, bundle.val, trigger, meta["poison"]["target_label"])
    return ckpt


def fine_tune(ckpt: Checkpoint, clean: Split, epochs: int = 5, lr: float | None = None,
              batch_size: int | None = None, seed: int = 0) -> Checkpoint:
    """Continue training a copy of ``ckpt`` on clean samples with a fresh Adam state."""
    if len(clean) == 0:
        raise ValueError("fine-tuning subset is empty")
    if clean.poisoned.any():
        raise ValueError("fine-tuning subset contains poisoned samples")
    train_cfg = ckpt.metadata.get("train_config", {})
    if lr is None:
        lr = train_cfg.get("lr", 3e-3) / 10
    if batch_size is None:
        batch_size = train_cfg.get("batch_size", 32)
    model = ckpt.model()
    if epochs > 0:
        _run_epochs(model, clean, epochs, batch_size, lr, np.random.default_rng([seed, 2]), AdamState())
    meta = dict(ckpt.metadata)
    meta["fine_tune"] = {"epochs": epochs, "lr": lr, "batch_size": batch_size, "samples": len(clean)}
    return Checkpoint.from_model(model, meta)


def _accuracy(model: Model, split: Split) -> float:
    return float(np.mean(predict(model, split.images) == split.labels))


def evaluate_accuracy(ckpt: Checkpoint | Model, samples: Split) -> float:
    if len(samples) == 0:
        raise ValueError("cannot evaluate accuracy on an empty sample list")
    model = ckpt.model() if isinstance(ckpt, Checkpoint) else ckpt
    return _accuracy(model, samples)


def evaluate_asr(ckpt: Checkpoint | Model, samples: Split, trigger: TriggerSpec, target: int) -> float:
    """Fraction of triggered samples (true label != target) predicted as ``target``."""
    keep = samples.labels != target
    if not keep.any():
        raise ValueError(f"no samples left after excluding target label {target}")
    model = ckpt.model() if isinstance(ckpt, Checkpoint) else ckpt
    preds = predict(model, apply_trigger(samples.images[keep], trigger))
    return float(np.mean(preds == target))


# ---- LDCK checkpoint format ------------------------------------------------

LDCK_MAGIC = b"LDCK"
LDCK_VERSION = 1


def encode_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return (struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())


def decode_tensors(raw: bytes, offset: int = 0, source: str = "<bytes>") -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    try:
        while offset < len(raw):
            (nlen,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + nlen].decode("utf-8")
            offset += nlen
            (rank,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if offset + 4 * count > len(raw):
                raise CheckpointError(f"{source}: truncated payload for tensor {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)
            offset += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"{source}: truncated tensor record ({exc})") from exc
    return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    block = json.dumps({"spec": ckpt.spec.to_dict(), "metadata": ckpt.metadata}, sort_keys=True).encode()
    parts = [LDCK_MAGIC, struct.pack("<H", LDCK_VERSION), struct.pack("<I", len(block)), block]
    parts += [encode_tensor(name, ckpt.params[name]) for name in sorted(ckpt.params)]
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != LDCK_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected 'LDCK'")
    if len(raw) < 10:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != LDCK_VERSION:
        raise CheckpointError(f"{path}: unsupported LDCK version {version}")
    (blen,) = struct.unpack_from("<I", raw, 6)
    if 10 + blen > len(raw):
        raise CheckpointError(f"{path}: truncated metadata block")
    try:
        block = json.loads(raw[10:10 + blen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt metadata block") from exc
    spec = ModelSpec.from_dict(block["spec"])
    params = decode_tensors(raw, 10 + blen, str(path))
    expected = set(Model.initialise(spec, 0).params)
    if set(params) != expected:
        raise CheckpointError(f"{path}: parameter set {sorted(params)} does not match architecture")
    return Checkpoint(spec, params, block["metadata"])
