"""Task-shared prototype generator: stacked graph convolutions.

Each layer computes ``act(norm_adj @ H @ W)``; hidden layers use LeakyReLU(0.2)
and the last layer is linear.
"""
import math

import numpy as np

from . import checkpoint
from .autodiff import Tensor, leaky_relu, matmul, take_rows

HIDDEN_SLOPE = 0.2

# ingestion-scale preset: 300-d word vectors, 2048 hidden, output set by the encoder
FULL_SCALE_DIMS = (300, 2048)
DESK_DIMS = (32, 64, 32)


class GcnModel:
    def __init__(self, weights, activations=None, seed=None):
        if not weights:
            raise ValueError("a GCN needs at least one layer")
        for a, b in zip(weights, weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError(f"layer dims do not chain: {a.shape} then {b.shape}")
        if activations is None:
            activations = ["leaky_relu"] * (len(weights) - 1) + ["identity"]
        if len(activations) != len(weights):
            raise ValueError("one activation per layer required")
        if activations[-1] != "identity":
            raise ValueError("the output layer must be linear")
        for name in activations:
            if name not in ("leaky_relu", "identity"):
                raise ValueError(f"unknown activation {name!r}")
        self.weights = weights
        self.activations = list(activations)
        self.seed = seed

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self):
        return self.dims[0]

    @property
    def output_dim(self):
        return self.dims[-1]

    def parameters(self):
        return list(self.weights)

    def to_bytes(self):
        header = {"kind": "gcn", "dims": self.dims, "activations": self.activations, "seed": self.seed}
        return checkpoint.dumps(header, [w.data for w in self.weights])

    @classmethod
    def from_bytes(cls, blob):
        model, used = cls._decode(blob)
        if used != len(blob):
            raise checkpoint.CheckpointError("trailing bytes after GCN checkpoint")
        return model

    @classmethod
    def _decode(cls, blob):
        header, arrays, used = checkpoint.loads(blob)
        if header.get("kind") != "gcn":
            raise checkpoint.CheckpointError("not a GCN checkpoint")
        weights = [Tensor(a, requires_grad=True) for a in arrays]
        return cls(weights, header["activations"], header.get("seed")), used


def glorot_bound(fan_in, fan_out):
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_gcn(dims, seed):
    dims = list(dims)
    if len(dims) < 2:
        raise ValueError(f"need at least input and output dims, got {dims}")
    if any(int(d) <= 0 for d in dims):
        raise ValueError(f"dimensions must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    weights = []
    for fan_in, fan_out in zip(dims, dims[1:]):
        b = glorot_bound(fan_in, fan_out)
        weights.append(Tensor(rng.uniform(-b, b, size=(fan_in, fan_out)), requires_grad=True))
    # only plain integer seeds are recorded in checkpoints
    return GcnModel(weights, seed=int(seed) if isinstance(seed, (int, np.integer)) else None)


def _propagate(model, graph, adjacency):
    if graph.word_dim != model.input_dim:
        raise ValueError(f"graph word vectors are {graph.word_dim}-d, GCN expects {model.input_dim}")
    h = Tensor(graph.word_vectors)
    for w, act in zip(model.weights, model.activations):
        h = matmul(matmul(adjacency, h), w) if adjacency is not None else matmul(h, w)
        if act == "leaky_relu":
            h = leaky_relu(h, HIDDEN_SLOPE)
    return h


def gcn_forward(model, graph):
    """Prototype for every graph node, ``L x V``."""
    return _propagate(model, graph, Tensor(graph.norm_adj))


def mlp_forward_ablation(model, graph):
    """Same layers with the adjacency replaced by the identity: no propagation."""
    return _propagate(model, graph, None)


def select_prototypes(all_protos, class_map, classes):
    """Rows of ``all_protos`` for ``classes``, in episode order."""
    classes = list(classes)
    if len(set(classes)) != len(classes):
        raise ValueError(f"episode classes must be distinct, got {classes}")
    missing = [c for c in classes if c not in class_map]
    if missing:
        raise KeyError(f"class id(s) not mapped to graph nodes: {missing}")
    return take_rows(all_protos, [class_map[c] for c in classes])
