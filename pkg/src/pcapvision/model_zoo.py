"""Network topologies built from tensor_core ops, plus model (de)serialization.

An ``ArchitectureSpec`` is an ordered list of layer descriptors.  Its shape
chain is checked when the spec is built; ``ModelState`` pairs a spec with
parameter arrays (float32) keyed by layer index.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from . import tensor_core as tc
from .errors import InvalidShape, IoError, ModelFormatError, NotFound, NumericError, Unsupported

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"
FORMAT_VERSION = 1


# ------------------------------------------------------------ layer descriptors

@dataclass(frozen=True)
class Pad:
    amount: int
    mode: str = "reflect"


@dataclass(frozen=True)
class Dropout:
    p: float


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kh: int
    kw: int
    sh: int
    sw: int


@dataclass(frozen=True)
class Elu:
    pass


@dataclass(frozen=True)
class MaxPool:
    ph: int
    pw: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Sigmoid:
    pass


Layer = Union[Pad, Dropout, Conv, Elu, MaxPool, Flatten, Dense, Sigmoid]
LAYER_TYPES = {cls.__name__: cls for cls in (Pad, Dropout, Conv, Elu, MaxPool, Flatten, Dense, Sigmoid)}


def _layer_to_dict(layer: Layer) -> dict:
    return {"type": type(layer).__name__, **dataclasses.asdict(layer)}


def _layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in LAYER_TYPES:
        raise ModelFormatError(f"unknown layer type {kind!r}")
    return LAYER_TYPES[kind](**d)


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    input_height: int
    input_width: int
    layers: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()  # validates

    def shapes(self) -> list[tuple[int, ...]]:
        """Static output shape after every layer (single sample, no batch axis)."""
        shape: tuple[int, ...] = (self.input_height, self.input_width)
        out = []
        sigmoids = [i for i, l in enumerate(self.layers) if isinstance(l, Sigmoid)]
        if sigmoids != [len(self.layers) - 1]:
            raise InvalidShape(f"{self.name}: exactly one Sigmoid, as the last layer, is required")
        for i, layer in enumerate(self.layers):
            where = f"{self.name} layer {i} ({type(layer).__name__})"
            if isinstance(layer, Pad):
                if len(shape) not in (2, 3):
                    raise InvalidShape(f"{where}: needs an image input, got {shape}")
                tc._check_pad(shape, layer.amount, layer.mode)
                shape = shape[:-2] + (shape[-2] + 2 * layer.amount, shape[-1] + 2 * layer.amount)
            elif isinstance(layer, Conv):
                if len(shape) not in (2, 3):
                    raise InvalidShape(f"{where}: needs an image input, got {shape}")
                h, w = shape[-2:]
                if layer.kh > h or layer.kw > w:
                    raise InvalidShape(f"{where}: kernel {layer.kh}x{layer.kw} larger than {h}x{w}")
                shape = (
                    layer.out_channels,
                    tc.conv_output_size(h, layer.kh, layer.sh),
                    tc.conv_output_size(w, layer.kw, layer.sw),
                )
            elif isinstance(layer, MaxPool):
                if len(shape) not in (2, 3) or layer.ph > shape[-2] or layer.pw > shape[-1]:
                    raise InvalidShape(f"{where}: window {layer.ph}x{layer.pw} does not fit {shape}")
                shape = shape[:-2] + (shape[-2] // layer.ph, shape[-1] // layer.pw)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise InvalidShape(f"{where}: needs a flat input, got {shape}")
                shape = (layer.units,)
            elif isinstance(layer, Dropout):
                if not 0 <= layer.p < 1:
                    raise InvalidShape(f"{where}: dropout p={layer.p} outside [0, 1)")
            out.append(shape)
        if out[-1] != (1,):
            raise InvalidShape(f"{self.name}: network must end in a single unit, got {out[-1]}")
        return out

    def param_shapes(self) -> dict[int, dict[str, tuple[int, ...]]]:
        shapes = {}
        prev: tuple[int, ...] = (self.input_height, self.input_width)
        for i, (layer, out) in enumerate(zip(self.layers, self.shapes())):
            if isinstance(layer, Conv):
                c_in = prev[0] if len(prev) == 3 else 1
                shapes[i] = {"weight": (layer.out_channels, c_in, layer.kh, layer.kw), "bias": (layer.out_channels,)}
            elif isinstance(layer, Dense):
                shapes[i] = {"weight": (layer.units, prev[0]), "bias": (layer.units,)}
            prev = out
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for d in self.param_shapes().values() for s in d.values())

    def conv_layers(self) -> set[int]:
        return {i for i, l in enumerate(self.layers) if isinstance(l, Conv)}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_height": self.input_height,
            "input_width": self.input_width,
            "layers": [_layer_to_dict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(d["name"], int(d["input_height"]), int(d["input_width"]), tuple(_layer_from_dict(l) for l in d["layers"]))


# ---------------------------------------------------------------- architectures

@dataclass(frozen=True)
class Geometry:
    """Hyperparameters shared by the conv-family topologies."""

    input_size: int = 1600
    pad: int = 48
    kernels: int = 4
    kernel: int = 64
    stride: int = 8
    pool: int = 8
    dense_units: int = 256
    input_dropout: float = 0.4
    hidden_dropout: float = 0.3


FULL = Geometry()
DESK = Geometry(input_size=256, pad=8, kernels=4, kernel=16, stride=4, pool=4, dense_units=64)

# name -> (padding mode or None, input dropout?)
VARIANTS = {
    "conv-pool-drop": (None, False),
    "wrappad-conv-pool-drop": ("wrap", False),
    "wrappad-drop-conv-pool-drop": ("wrap", True),
    "reflectpad-drop-conv-pool-drop": ("reflect", True),
}

OUT_OF_SCOPE = {
    "1-layer lstm",
    "3-layer lstm",
    "1-layer conv2d & batchnorm",
    "1-layer conv2d & batchnorm & maxpool",
}


def _conv_family(name: str, pad_mode: str | None, input_dropout: bool, g: Geometry) -> ArchitectureSpec:
    layers: list[Layer] = []
    if pad_mode is not None:
        layers.append(Pad(g.pad, pad_mode))
    if input_dropout:
        layers.append(Dropout(g.input_dropout))
    layers += [
        Conv(g.kernels, g.kernel, g.kernel, g.stride, g.stride),
        Elu(),
        MaxPool(g.pool, g.pool),
        Flatten(),
        Dense(g.dense_units),
        Elu(),
        Dropout(g.hidden_dropout),
        Dense(1),
        Sigmoid(),
    ]
    return ArchitectureSpec(name, g.input_size, g.input_size, tuple(layers))


def build_pcapvision(geometry: Geometry = FULL) -> ArchitectureSpec:
    name = "pcapvision" if geometry == FULL else "pcapvision-desk"
    return _conv_family(name, "reflect", True, geometry)


def build_variant(name: str, geometry: Geometry = FULL) -> ArchitectureSpec:
    key = name.strip().lower()
    if key in ("pcapvision", "pcapvision-desk"):
        return build_pcapvision(DESK if key.endswith("-desk") else geometry)
    if key.endswith("-desk") and key[: -len("-desk")] in VARIANTS:
        key, geometry = key[: -len("-desk")], DESK
    if key in OUT_OF_SCOPE or "lstm" in key or "gru" in key or "batchnorm" in key:
        raise Unsupported(f"architecture {name!r} is not supported (recurrent/BatchNorm variants are out of scope)")
    if key not in VARIANTS:
        raise Unsupported(f"unknown architecture {name!r}; choose from {sorted(VARIANTS)}")
    pad_mode, drop = VARIANTS[key]
    suffix = "" if geometry == FULL else "-desk"
    return _conv_family(key + suffix, pad_mode, drop, geometry)


# ------------------------------------------------------------------ model state

@dataclass
class ModelState:
    spec: ArchitectureSpec
    params: dict[int, dict[str, np.ndarray]]
    frozen: frozenset = frozenset()
    version_id: str = "untrained"
    calibrated_threshold: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if set(self.params) != set(expected):
            raise ModelFormatError(f"parameter layers {sorted(self.params)} != spec {sorted(expected)}")
        for i, shapes in expected.items():
            for key, shape in shapes.items():
                if self.params[i][key].shape != shape:
                    raise ModelFormatError(f"layer {i} {key}: shape {self.params[i][key].shape} != {shape}")
        self.frozen = frozenset(self.frozen)
        if not self.frozen <= set(expected):
            raise ValueError("frozen layers must be parametric layers")
        if self.calibrated_threshold is not None and not 0 < self.calibrated_threshold < 1:
            raise ValueError(f"threshold must be in (0, 1), got {self.calibrated_threshold}")

    def flat_params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, d in sorted(self.params.items()) for k, v in d.items()}

    def trainable(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, d in sorted(self.params.items()) if i not in self.frozen for k, v in d.items()}

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)


def new_version_id(rng: np.random.Generator) -> str:
    return "m" + format(int(rng.integers(0, 2**32)), "08x")


def init_params(spec: ArchitectureSpec, rng: np.random.Generator) -> ModelState:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    params = {}
    for i, shapes in spec.param_shapes().items():
        wshape = shapes["weight"]
        fan_in = int(np.prod(wshape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        params[i] = {
            "weight": rng.uniform(-bound, bound, size=wshape).astype(np.float32),
            "bias": np.zeros(shapes["bias"], dtype=np.float32),
        }
    return ModelState(spec, params)


def set_frozen(model: ModelState, layers: str | Iterable[int] = ()) -> ModelState:
    """Return a copy with ``layers`` frozen; ``"conv"`` selects every conv layer."""
    if layers == "conv":
        chosen = model.spec.conv_layers()
    elif isinstance(layers, str):
        raise ValueError(f"unknown layer selector {layers!r}")
    else:
        chosen = set(layers)
    return dataclasses.replace(model, frozen=frozenset(chosen))


# --------------------------------------------------------------- forward/backward

@dataclass
class Tape:
    """Per-layer values recorded during a training-mode forward pass."""

    inputs: list = field(default_factory=list)
    extras: list = field(default_factory=list)
    output: np.ndarray | None = None


def forward_batch(
    model: ModelState,
    x: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
    record: bool = False,
) -> tuple[np.ndarray, Tape | None]:
    """Run a batch ``(N, H, W)`` through the network; returns probabilities ``(N,)``."""
    spec = model.spec
    if x.ndim != 3 or x.shape[1:] != (spec.input_height, spec.input_width):
        raise InvalidShape(f"expected input (N, {spec.input_height}, {spec.input_width}), got {x.shape}")
    tape = Tape() if record else None
    h = x
    for i, layer in enumerate(spec.layers):
        extra = None
        inp = h
        if isinstance(layer, Pad):
            h = tc.pad2d(h, layer.amount, layer.mode)
        elif isinstance(layer, Dropout):
            h, extra = tc.dropout(h, layer.p, rng, training)
        elif isinstance(layer, Conv):
            if h.ndim == 3:
                h = h[:, None]
                inp = h
            p = model.params[i]
            h = tc.conv2d(h, p["weight"], p["bias"], (layer.sh, layer.sw))
        elif isinstance(layer, Elu):
            h = tc.elu(h)
        elif isinstance(layer, MaxPool):
            h = tc.maxpool2d(h, (layer.ph, layer.pw))
        elif isinstance(layer, Flatten):
            h = h.reshape(h.shape[0], -1)
        elif isinstance(layer, Dense):
            p = model.params[i]
            h = tc.dense(h, p["weight"], p["bias"])
        elif isinstance(layer, Sigmoid):
            h = tc.sigmoid(h)
        if not np.all(np.isfinite(h)):
            raise NumericError(f"non-finite activation after layer {i} ({type(layer).__name__})")
        if tape is not None:
            tape.inputs.append(inp)
            tape.extras.append(extra)
    if tape is not None:
        tape.output = h
    return h.reshape(-1), tape


def backward(model: ModelState, tape: Tape, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every trainable parameter given d(loss)/d(probabilities)."""
    spec = model.spec
    parametric = sorted(i for i in spec.param_shapes() if i not in model.frozen)
    grads: dict[str, np.ndarray] = {}
    if not parametric:
        return grads
    first_needed = parametric[0]
    g = grad_out.reshape(tape.output.shape).astype(tape.output.dtype, copy=False)
    for i in range(len(spec.layers) - 1, first_needed - 1, -1):
        layer = spec.layers[i]
        inp = tape.inputs[i]
        if isinstance(layer, Sigmoid):
            g = tc.sigmoid_backward(g, tc.sigmoid(inp))
        elif isinstance(layer, Dense):
            p = model.params[i]
            dx, dw, db = tc.dense_backward(g, inp, p["weight"])
            if i not in model.frozen:
                grads[f"{i}.weight"], grads[f"{i}.bias"] = dw, db
            g = dx
        elif isinstance(layer, Dropout):
            g = tc.dropout_backward(g, tape.extras[i])
        elif isinstance(layer, Elu):
            g = tc.elu_backward(g, inp)
        elif isinstance(layer, Flatten):
            g = g.reshape(inp.shape)
        elif isinstance(layer, MaxPool):
            g = tc.maxpool2d_backward(g, inp, (layer.ph, layer.pw))
        elif isinstance(layer, Conv):
            p = model.params[i]
            dx, dw, db = tc.conv2d_backward(g, inp, p["weight"], (layer.sh, layer.sw), need_input_grad=i > first_needed)
            if i not in model.frozen:
                grads[f"{i}.weight"], grads[f"{i}.bias"] = dw, db
            g = dx
        elif isinstance(layer, Pad):
            g = tc.pad2d_backward(g, layer.amount, layer.mode, inp.shape)
    return grads


def forward(model: ModelState, x: np.ndarray, mode: str = "eval", rng: np.random.Generator | None = None) -> float:
    """Probability of failure for a single ``(H, W)`` unit-scaled image."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    probs, _ = forward_batch(model, np.asarray(x)[None], training=mode == "train", rng=rng)
    return float(probs[0])


def predict_scores(model: ModelState, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode scores for a uint8 ``(N, H, W)`` stack (or already-scaled floats)."""
    out = np.empty(len(images), dtype=np.float64)
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        if chunk.dtype == np.uint8:
            chunk = chunk.astype(np.float32) / np.float32(255.0)
        out[start : start + len(chunk)] = forward_batch(model, chunk)[0]
    return out


# ----------------------------------------------------------------- serialization

def save_model(model: ModelState, directory: str | os.PathLike) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = []
    blobs = []
    for i, shapes in sorted(model.spec.param_shapes().items()):
        for key in ("weight", "bias"):
            tensors.append({"layer": i, "name": key, "shape": list(shapes[key])})
            blobs.append(np.ascontiguousarray(model.params[i][key], dtype="<f4").tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "version_id": model.version_id,
        "spec": model.spec.to_dict(),
        "tensors": tensors,
        "frozen": sorted(model.frozen),
        "threshold": model.calibrated_threshold,
        "metadata": model.metadata,
    }
    (d / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (d / WEIGHTS_NAME).write_bytes(b"".join(blobs))
    return d


def load_model(directory: str | os.PathLike) -> ModelState:
    d = Path(directory)
    if not (d / MANIFEST_NAME).is_file():
        raise NotFound(f"{d}: no {MANIFEST_NAME}")
    try:
        manifest = json.loads((d / MANIFEST_NAME).read_text())
        blob = (d / WEIGHTS_NAME).read_bytes()
    except FileNotFoundError as exc:
        raise ModelFormatError(f"{d}: missing {WEIGHTS_NAME}") from exc
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{d}: manifest is not valid JSON") from exc
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"{d}: unsupported format version {manifest.get('format_version')}")
    try:
        spec = ArchitectureSpec.from_dict(manifest["spec"])
    except (KeyError, TypeError, InvalidShape) as exc:
        raise ModelFormatError(f"{d}: invalid architecture in manifest: {exc}") from exc
    expected = spec.param_shapes()
    total = sum(int(np.prod(t["shape"])) for t in manifest["tensors"])
    if len(blob) != 4 * total:
        raise ModelFormatError(f"{d}: weights blob has {len(blob)} bytes, manifest needs {4 * total}")
    arr = np.frombuffer(blob, dtype="<f4")
    params: dict[int, dict[str, np.ndarray]] = {}
    offset = 0
    for t in manifest["tensors"]:
        i, name, shape = int(t["layer"]), t["name"], tuple(t["shape"])
        if i not in expected or expected[i].get(name) != shape:
            raise ModelFormatError(f"{d}: tensor {i}.{name} {shape} does not match the architecture")
        n = int(np.prod(shape))
        params.setdefault(i, {})[name] = arr[offset : offset + n].astype(np.float32).reshape(shape)
        offset += n
    return ModelState(
        spec,
        params,
        frozenset(manifest.get("frozen", [])),
        manifest.get("version_id", "unknown"),
        manifest.get("threshold"),
        manifest.get("metadata", {}),
    )
