"""Multi-head convolutional backbone and its parameter file format.

Parameter files come in pairs: ``<stem>.bin`` holds every parameter as
little-endian float64 values concatenated in manifest order, and
``<stem>.json`` is the manifest::

    {"format": "cecnn-backbone", "version": 1,
     "spec": {...},                        # BackboneSpec as a dict
     "params": [{"name": "0.kernels", "shape": [8, 1, 3, 3], "offset": 0}, ...]}

``offset`` counts float64 elements, not bytes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ShapeError
from .layers import ACTIVATIONS, Layer, activation_apply, glorot_uniform
from .tensor import Tensor, as_tensor

# conv(8,3x3,stride 3) -> tanh -> maxpool(1) -> conv(16,3x3,pad 1) -> tanh -> maxpool(1) -> dense(32) -> tanh
# The stride-3 first kernel tiles the image into its nine 3x3 blocks, so every
# later feature stays tied to one block position.  Pooling windows of 2 mix
# neighbouring blocks and cost accuracy on the block-structured responses.
DEFAULT_LAYERS: tuple[dict, ...] = (
    {"kind": "conv2d", "filters": 8, "kernel": 3, "stride": 3, "padding": 0},
    {"kind": "activation", "name": "tanh"},
    {"kind": "maxpool2d", "pool": 1, "stride": 1},
    {"kind": "conv2d", "filters": 16, "kernel": 3, "stride": 1, "padding": 1},
    {"kind": "activation", "name": "tanh"},
    {"kind": "maxpool2d", "pool": 1, "stride": 1},
    {"kind": "dense", "units": 32},
    {"kind": "activation", "name": "tanh"},
)


@dataclass
class BackboneSpec:
    input_shape: tuple[int, int, int] = (1, 9, 9)
    layers: list[dict] = field(default_factory=lambda: [dict(d) for d in DEFAULT_LAYERS])
    head_activations: list[str] = field(default_factory=lambda: ["identity", "identity"])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(
            input_shape=tuple(d["input_shape"]),
            layers=[dict(x) for x in d["layers"]],
            head_activations=list(d["head_activations"]),
        )


class Backbone:
    """Shared feature extractor ``D`` followed by one affine head per response."""

    def __init__(self, spec: BackboneSpec, shared: list[Layer], head_weight: Tensor,
                 head_bias: Tensor, feature_width: int):
        self.spec = spec
        self.shared = shared
        self.head_weight = head_weight  # [n_heads, K]
        self.head_bias = head_bias  # [n_heads]
        self.feature_width = feature_width

    @property
    def n_heads(self) -> int:
        return self.head_weight.shape[0]

    @property
    def head_activations(self) -> list[str]:
        return self.spec.head_activations

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.shared):
            for key in sorted(layer.params):
                out.append((f"{i}.{key}", layer.params[key]))
        out.append(("heads.weight", self.head_weight))
        out.append(("heads.bias", self.head_bias))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def features(self, x) -> Tensor:
        h = as_tensor(x)
        if h.ndim == 3:
            h = h.reshape((1,) + h.shape)
        if h.shape[1:] != tuple(self.spec.input_shape):
            raise ShapeError(f"backbone expects inputs {self.spec.input_shape}, got {h.shape[1:]}")
        for layer in self.shared:
            h = layer.forward(h)
        return h

    def forward(self, x) -> Tensor:
        """Raw (pre-activation) head outputs, shape [N, n_heads]."""
        return self.features(x) @ self.head_weight.T + self.head_bias

    def activate(self, raw: Tensor) -> list[Tensor]:
        """Split raw head outputs into per-head columns with the head activations applied."""
        return [activation_apply(raw[:, j], a) for j, a in enumerate(self.head_activations)]

    def predict(self, x) -> np.ndarray:
        from .tensor import no_grad

        with no_grad():
            cols = self.activate(self.forward(x))
        return np.stack([c.data for c in cols], axis=1)

    # -- state ------------------------------------------------------------------
    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, state: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(state) != len(params):
            raise ShapeError(f"state has {len(state)} arrays, backbone has {len(params)}")
        for p, s in zip(params, state):
            if p.shape != s.shape:
                raise ShapeError(f"state array shape {s.shape} != parameter shape {p.shape}")
            p.data[...] = s

    def copy(self) -> "Backbone":
        clone = build_backbone(self.spec, seed=0)
        clone.load_state(self.state())
        return clone

    def save(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        entries, offset = [], 0
        for name, p in self.named_parameters():
            entries.append({"name": name, "shape": list(p.shape), "offset": offset})
            offset += p.size
        flat = np.concatenate([p.data.reshape(-1) for p in self.parameters()])
        bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
        bin_path.write_bytes(flat.astype("<f8").tobytes())
        manifest = {"format": "cecnn-backbone", "version": 1,
                    "spec": self.spec.to_dict(), "params": entries}
        json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return bin_path, json_path

    @classmethod
    def load(cls, stem: str | Path) -> "Backbone":
        stem = Path(stem)
        manifest = json.loads(stem.with_suffix(".json").read_text())
        if manifest.get("format") != "cecnn-backbone":
            raise ValueError(f"{stem}.json is not a backbone manifest")
        flat = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
        model = build_backbone(BackboneSpec.from_dict(manifest["spec"]), seed=0)
        named = dict(model.named_parameters())
        for entry in manifest["params"]:
            p = named[entry["name"]]
            size = int(np.prod(entry["shape"]))
            p.data[...] = flat[entry["offset"]: entry["offset"] + size].reshape(entry["shape"])
        return model


def build_backbone(spec: BackboneSpec | None = None, seed: int = 0) -> Backbone:
    """Instantiate ``spec`` with Glorot-uniform weights drawn from ``seed``.

    A flatten layer is inserted automatically before the first dense layer.
    Raises ShapeError when consecutive layers do not chain.
    """
    spec = spec or BackboneSpec()
    if not spec.head_activations:
        raise ValueError("backbone needs at least one head")
    for a in spec.head_activations:
        if a not in ACTIVATIONS:
            raise ValueError(f"unknown head activation {a!r}")
    rng = np.random.default_rng(seed)
    shape = tuple(spec.input_shape)
    layers: list[Layer] = []
    for cfg in spec.layers:
        kind = cfg["kind"]
        if kind == "conv2d":
            if len(shape) != 3:
                raise ShapeError(f"conv2d cannot follow a flattened shape {shape}")
            c, k = shape[0], cfg["kernel"]
            f = cfg["filters"]
            kernels = glorot_uniform(rng, (f, c, k, k), c * k * k, f * k * k)
            layer = Layer("conv2d", {"kernels": Tensor(kernels, True), "bias": Tensor(np.zeros(f), True)},
                          {"stride": cfg.get("stride", 1), "padding": cfg.get("padding", 0)})
        elif kind == "maxpool2d":
            if len(shape) != 3:
                raise ShapeError(f"maxpool2d cannot follow a flattened shape {shape}")
            pool = cfg["pool"]
            layer = Layer("maxpool2d", hyper={"pool": pool, "stride": cfg.get("stride", pool)})
        elif kind == "dense":
            if len(shape) != 1:
                flat = Layer("flatten")
                shape = flat.output_shape(shape)
                layers.append(flat)
            units = cfg["units"]
            w = glorot_uniform(rng, (units, shape[0]), shape[0], units)
            layer = Layer("dense", {"weight": Tensor(w, True), "bias": Tensor(np.zeros(units), True)})
        elif kind == "activation":
            if cfg["name"] not in ACTIVATIONS:
                raise ValueError(f"unknown activation {cfg['name']!r}")
            layer = Layer("activation", hyper={"name": cfg["name"]})
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        shape = layer.output_shape(shape)
        if any(s < 1 for s in shape):
            raise ShapeError(f"layer {cfg} produces an empty output {shape}")
        layers.append(layer)
    if len(shape) != 1:
        flat = Layer("flatten")
        shape = flat.output_shape(shape)
        layers.append(flat)
    k = shape[0]
    p = len(spec.head_activations)
    head_w = glorot_uniform(rng, (p, k), k, 1)
    for i, layer in enumerate(layers):
        for key, t in layer.params.items():
            t.name = f"{i}.{key}"
    return Backbone(spec, layers, Tensor(head_w, True, name="heads.weight"),
                    Tensor(np.zeros(p), True, name="heads.bias"), k)
