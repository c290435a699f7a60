"""Layer descriptors, parameter initialisation and the probed forward pass."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LAYER_KINDS = ("conv2d", "relu", "maxpool", "flatten", "dense")
HEADS = ("softmax", "embedding")


@dataclass
class ModelSpec:
    """Architecture as an ordered list of layer descriptors.

    Each descriptor is a dict with ``kind`` (one of :data:`LAYER_KINDS`), ``out``
    for conv2d/dense, and an optional ``probe`` name marking that layer's output
    as an observation point.
    """

    input_shape: tuple[int, int, int]
    layers: list[dict[str, Any]]
    head: str = "softmax"

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = [dict(layer) for layer in self.layers]
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        self.shapes()  # validates composition
        if not self.probe_names():
            raise ValueError("model declares no probe points")
        last_hidden = self._last_hidden_index()
        if last_hidden is not None and "probe" not in self.layers[last_hidden]:
            raise ValueError(f"last hidden layer (index {last_hidden}) must be a probe point")

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape (without batch axis) of every layer."""
        shape: tuple[int, ...] = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            kind = layer.get("kind")
            if kind not in LAYER_KINDS:
                raise ValueError(f"layer {i}: unknown kind {kind!r}")
            if kind == "conv2d":
                if len(shape) != 3:
                    raise ShapeError(f"layer {i}: conv2d needs (c, h, w) input, got {shape}")
                shape = (int(layer["out"]), shape[1], shape[2])
            elif kind == "maxpool":
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ShapeError(f"layer {i}: maxpool needs even (c, h, w), got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif kind == "dense":
                if len(shape) != 1:
                    raise ShapeError(f"layer {i}: dense needs flat input, got {shape}")
                shape = (int(layer["out"]),)
            out.append(shape)
        if len(shape) != 1:
            raise ShapeError(f"model output must be flat, got {shape}")
        return out

    def probe_names(self) -> list[str]:
        return [layer["probe"] for layer in self.layers if "probe" in layer]

    def probe_dims(self) -> dict[str, int]:
        shapes = self.shapes()
        return {layer["probe"]: int(np.prod(s)) for layer, s in zip(self.layers, shapes) if "probe" in layer}

    @property
    def output_dim(self) -> int:
        return self.shapes()[-1][0]

    def _last_hidden_index(self) -> int | None:
        last_param = max((i for i, l in enumerate(self.layers) if l["kind"] in ("dense", "conv2d")), default=None)
        if last_param is None:
            return None
        hidden = None
        for i in range(last_param):
            if self.layers[i]["kind"] in ("dense", "conv2d", "relu", "maxpool"):
                hidden = i
        return hidden

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [dict(l) for l in self.layers], "head": self.head}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(input_shape=tuple(d["input_shape"]), layers=d["layers"], head=d.get("head", "softmax"))


def desk_cnn(num_classes: int, input_shape=(3, 16, 16), hidden: int = 64) -> ModelSpec:
    """conv(8) relu pool, conv(16) relu pool, dense(hidden) relu, dense(num_classes).

    Probes sit after each block. Block 3 is the parameter-free flatten, so the
    hidden dense block is the fourth and its probe is named ``layer4``.
    """
    return ModelSpec(
        input_shape=tuple(input_shape),
        layers=[
            {"kind": "conv2d", "out": 8},
            {"kind": "relu"},
            {"kind": "maxpool", "probe": "layer1"},
            {"kind": "conv2d", "out": 16},
            {"kind": "relu"},
            {"kind": "maxpool", "probe": "layer2"},
            {"kind": "flatten"},
            {"kind": "dense", "out": hidden},
            {"kind": "relu", "probe": "layer4"},
            {"kind": "dense", "out": num_classes},
        ],
    )


def init_params(spec: ModelSpec, seed: int) -> dict[str, Tensor]:
    """He-normal weights, zero biases, drawn from a seeded generator."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    shape: tuple[int, ...] = spec.input_shape
    for i, (layer, out_shape) in enumerate(zip(spec.layers, spec.shapes())):
        if layer["kind"] == "conv2d":
            fan_in = shape[0] * 9
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_shape[0], shape[0], 3, 3))
            params[f"l{i}.weight"] = Tensor(w, requires_grad=True, name=f"l{i}.weight")
            params[f"l{i}.bias"] = Tensor(np.zeros(out_shape[0]), requires_grad=True, name=f"l{i}.bias")
        elif layer["kind"] == "dense":
            w = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=(shape[0], out_shape[0]))
            params[f"l{i}.weight"] = Tensor(w, requires_grad=True, name=f"l{i}.weight")
            params[f"l{i}.bias"] = Tensor(np.zeros(out_shape[0]), requires_grad=True, name=f"l{i}.bias")
        shape = out_shape
    return params


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def initialise(cls, spec: ModelSpec, seed: int) -> "Model":
        return cls(spec, init_params(spec, seed))

    def copy(self) -> "Model":
        return Model(self.spec, {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()})

    def forward(self, batch: Tensor | np.ndarray, probes=None) -> tuple[Tensor, dict[str, Tensor]]:
        return forward(self, batch, probes)

    __call__ = forward


def forward(model: Model, batch, probes=None) -> tuple[Tensor, dict[str, Tensor]]:
    """Run ``batch`` (n, c, h, w) through ``model``.

    Returns the head output (logits or embeddings) and a dict of flattened
    (n, p) activations for the requested probe names (all when ``probes`` is None).
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    spec = model.spec
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(f"expected input (n, {', '.join(map(str, spec.input_shape))}), got {tuple(x.shape)}")
    wanted = set(spec.probe_names()) if probes is None else set(probes)
    unknown = wanted - set(spec.probe_names())
    if unknown:
        raise KeyError(f"unknown probe layer(s) {sorted(unknown)}; declared: {spec.probe_names()}")
    taken: dict[str, Tensor] = {}
    for i, layer in enumerate(spec.layers):
        kind = layer["kind"]
        if kind == "conv2d":
            x = ad.add_bias(ad.conv2d(x, model.params[f"l{i}.weight"]), model.params[f"l{i}.bias"])
        elif kind == "dense":
            x = ad.add_bias(ad.matmul(x, model.params[f"l{i}.weight"]), model.params[f"l{i}.bias"])
        elif kind == "relu":
            x = ad.relu(x)
        elif kind == "maxpool":
            x = ad.maxpool2x2(x)
        elif kind == "flatten":
            x = ad.flatten(x)
        name = layer.get("probe")
        if name in wanted:
            taken[name] = x if x.ndim == 2 else ad.flatten(x)
    return x, taken


def predict(model: Model, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Arg-max class predictions; ties break toward the lower index."""
    preds = []
    for start in range(0, len(images), batch_size):
        logits, _ = forward(model, images[start:start + batch_size], probes=())
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def activations(model: Model, images: np.ndarray, layer: str, batch_size: int = 512) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        _, probes = forward(model, images[start:start + batch_size], probes=(layer,))
        out.append(probes[layer].data)
    return np.concatenate(out)
