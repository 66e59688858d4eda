"""Dense embedding network with hand-derived forward and backward passes.

The backward pass produces gradients with respect to both the parameters
and the inputs; the input gradient is what every attack consumes. The ReLU
subgradient at exactly zero is taken as zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .rng import Rng

RELU = "relu"
IDENTITY = "identity"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture knobs; the input width comes from the dataset."""

    hidden: tuple = (64, 64)
    embedding_dim: int = 16
    normalize: bool = True

    def layer_sizes(self, input_dim: int) -> list:
        return [int(input_dim), *(int(h) for h in self.hidden), int(self.embedding_dim)]


@dataclass
class Layer:
    weight: np.ndarray  # [in, out]
    bias: np.ndarray    # [out]
    activation: str


@dataclass
class EmbeddingModel:
    """Multi-layer perceptron mapping inputs to embeddings.

    With `normalize` on, every output row is projected to the unit sphere;
    a row that is exactly zero before normalization is an error.
    """

    layers: list
    normalize: bool

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def layer_sizes(self) -> list:
        return [self.input_dim] + [lay.weight.shape[1] for lay in self.layers]

    def params(self) -> dict:
        """Live views of the parameters, keyed for the optimizer."""
        out = {}
        for k, lay in enumerate(self.layers):
            out[f"layer{k}.weight"] = lay.weight
            out[f"layer{k}.bias"] = lay.bias
        return out

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(
            layers=[Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            normalize=self.normalize,
        )


@dataclass
class ForwardTrace:
    """Per-layer values retained by forward() for the backward pass."""

    x: np.ndarray
    pre_acts: list = field(default_factory=list)
    acts: list = field(default_factory=list)
    pre_norm: np.ndarray | None = None
    norms: np.ndarray | None = None
    model_ref: EmbeddingModel | None = None


def init_model(layer_sizes, normalize: bool, rng: Rng) -> EmbeddingModel:
    """He-initialized MLP: weights ~ N(0, 2/fan_in), biases zero.

    Hidden layers use ReLU; the final layer is linear.
    """
    if len(layer_sizes) < 2 or any(int(s) <= 0 for s in layer_sizes):
        raise ConfigError(f"need >= 2 positive layer sizes, got {layer_sizes}")
    layers = []
    for k in range(len(layer_sizes) - 1):
        n_in, n_out = int(layer_sizes[k]), int(layer_sizes[k + 1])
        w = rng.split(f"layer:{k}").normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
        b = np.zeros(n_out)
        act = IDENTITY if k == len(layer_sizes) - 2 else RELU
        layers.append(Layer(w, b, act))
    return EmbeddingModel(layers=layers, normalize=normalize)


def forward(model: EmbeddingModel, x: np.ndarray):
    """Compute embeddings for a batch; returns (embeddings, trace)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError("x", (None, model.input_dim), x.shape)
    if not np.all(np.isfinite(x)):
        raise NumericError("forward input contains non-finite values")
    trace = ForwardTrace(x=x, model_ref=model)
    a = x
    for lay in model.layers:
        z = a @ lay.weight + lay.bias
        trace.pre_acts.append(z)
        a = np.maximum(z, 0.0) if lay.activation == RELU else z
        trace.acts.append(a)
    if model.normalize:
        norms = np.linalg.norm(a, axis=1)
        zero = norms == 0.0
        if np.any(zero):
            raise NumericError(
                f"cannot normalize zero embedding row(s) {np.where(zero)[0].tolist()}"
            )
        trace.pre_norm = a
        trace.norms = norms
        a = a / norms[:, None]
    return a, trace


def backward(model: EmbeddingModel, trace: ForwardTrace, d_embed: np.ndarray):
    """Reverse-mode gradients through the trace.

    Returns (d_params, d_x) where d_params matches model.params() keys.
    """
    if trace.model_ref is not model:
        raise ConfigError("trace does not belong to this model")
    d_embed = np.asarray(d_embed, dtype=float)
    expected = (trace.x.shape[0], model.embedding_dim)
    if d_embed.shape != expected:
        raise ShapeError("d_embed", expected, d_embed.shape)

    if model.normalize:
        y = trace.pre_norm
        r = trace.norms[:, None]
        e = y / r
        # d/dy of y/||y||: remove the radial component, then scale by 1/||y||
        da = (d_embed - e * np.sum(e * d_embed, axis=1, keepdims=True)) / r
    else:
        da = d_embed

    d_params = {}
    for k in range(len(model.layers) - 1, -1, -1):
        lay = model.layers[k]
        z = trace.pre_acts[k]
        dz = da * (z > 0.0) if lay.activation == RELU else da
        a_prev = trace.x if k == 0 else trace.acts[k - 1]
        d_params[f"layer{k}.weight"] = a_prev.T @ dz
        d_params[f"layer{k}.bias"] = dz.sum(axis=0)
        da = dz @ lay.weight.T
    return d_params, da


def model_to_dict(model: EmbeddingModel) -> dict:
    return {
        "layer_sizes": model.layer_sizes,
        "normalize": model.normalize,
        "layers": [
            {"weight": lay.weight.tolist(), "bias": lay.bias.tolist(), "activation": lay.activation}
            for lay in model.layers
        ],
    }


def model_from_dict(doc: dict) -> EmbeddingModel:
    layers = [
        Layer(
            np.array(entry["weight"], dtype=float),
            np.array(entry["bias"], dtype=float),
            entry["activation"],
        )
        for entry in doc["layers"]
    ]
    model = EmbeddingModel(layers=layers, normalize=bool(doc["normalize"]))
    if model.layer_sizes != list(doc["layer_sizes"]):
        raise ConfigError("layer_sizes field disagrees with stored weight shapes")
    return model


def save_model(model: EmbeddingModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, sort_keys=True)


def load_model(path) -> EmbeddingModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
