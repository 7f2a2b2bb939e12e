"""Graph prototypical network.

Class prototypes mix the support-set mean embedding with a GCN prediction
from the concept graph::

    e_n = lam * mean(f(support of n)) + (1 - lam) * g(word vectors)[node(n)]

and queries are classified by a softmax over negative distances to the
prototypes. ``lam = 1`` is a plain prototypical network; ``lam = 0`` uses
only the graph (zero-shot).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .autodiff import (
    Tensor,
    add_bias,
    axpby,
    leaky_relu,
    matmul,
    pairwise_sq_dist,
    row_mean,
    scale,
    softmax_cross_entropy,
    softmax_rows,
    sqrt,
    stack_rows,
    take_rows,
)
from .gcn import GcnModel, gcn_forward, glorot_bound, mlp_forward_ablation, select_prototypes

HIDDEN_SLOPE = 0.2
DISTANCE_MODES = ("squared", "unsquared")
GRAPH_MODES = ("gcn", "fc")


class Encoder:
    """MLP embedding ``f``: LeakyReLU(0.2) hidden layers, linear output."""

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for a, b in zip(weights, weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError(f"layer dims do not chain: {a.shape} then {b.shape}")
        for w, b in zip(weights, biases):
            if b.shape != (w.shape[1],):
                raise ValueError(f"bias shape {b.shape} does not fit weight {w.shape}")
        self.weights = weights
        self.biases = biases

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
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x):
        h = x if isinstance(x, Tensor) else Tensor(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = add_bias(matmul(h, w), b)
            if i < last:
                h = leaky_relu(h, HIDDEN_SLOPE)
        return h

    def to_bytes(self):
        header = {"kind": "encoder", "dims": self.dims}
        return checkpoint.dumps(header, [p.data for p in self.parameters()])

    @classmethod
    def _decode(cls, blob):
        header, arrays, used = checkpoint.loads(blob)
        if header.get("kind") != "encoder":
            raise checkpoint.CheckpointError("not an encoder checkpoint")
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        return cls(ts[0::2], ts[1::2]), used


def init_encoder(dims, seed):
    dims = list(dims)
    if len(dims) < 2 or any(int(d) <= 0 for d in dims):
        raise ValueError(f"invalid encoder dims {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims, dims[1:]):
        b = glorot_bound(fan_in, fan_out)
        weights.append(Tensor(rng.uniform(-b, b, size=(fan_in, fan_out)), requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return Encoder(weights, biases)


class GpnModel:
    """Encoder + GCN + concept graph + mixing weight.

    ``gcn=None`` gives the graph-free prototypical network; it is only valid
    with ``lam == 1``.
    """

    def __init__(self, encoder, gcn, graph, class_map, lam=0.5,
                 distance_mode="squared", graph_mode="gcn"):
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {lam}")
        if distance_mode not in DISTANCE_MODES:
            raise ValueError(f"distance_mode must be one of {DISTANCE_MODES}")
        if graph_mode not in GRAPH_MODES:
            raise ValueError(f"graph_mode must be one of {GRAPH_MODES}")
        if gcn is None:
            if lam != 1.0:
                raise ValueError("a model without a GCN needs lambda == 1")
        else:
            if gcn.output_dim != encoder.output_dim:
                raise ValueError(f"GCN output dim {gcn.output_dim} != encoder output dim {encoder.output_dim}")
            if graph is None or class_map is None:
                raise ValueError("a GCN needs a concept graph and a class map")
            if graph.word_dim != gcn.input_dim:
                raise ValueError(f"graph word vectors are {graph.word_dim}-d, GCN expects {gcn.input_dim}")
        self.encoder = encoder
        self.gcn = gcn
        self.graph = graph
        self.class_map = class_map
        self.lam = float(lam)
        self.distance_mode = distance_mode
        self.graph_mode = graph_mode

    def parameters(self):
        ps = self.encoder.parameters()
        if self.gcn is not None:
            ps += self.gcn.parameters()
        return ps

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_vector(self):
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def load_param_vector(self, vec):
        off = 0
        for p in self.parameters():
            n = p.data.size
            p.data = np.array(vec[off:off + n]).reshape(p.data.shape)
            off += n

    def shared_all(self):
        """GCN (or fc ablation) output for every graph node."""
        if self.gcn is None:
            return None
        if self.graph_mode == "fc":
            return mlp_forward_ablation(self.gcn, self.graph)
        return gcn_forward(self.gcn, self.graph)

    # checkpoints ------------------------------------------------------

    def to_bytes(self):
        header = {
            "kind": "gpn",
            "lambda": self.lam,
            "distance_mode": self.distance_mode,
            "graph_mode": self.graph_mode,
            "dims": {"encoder": self.encoder.dims, "gcn": self.gcn.dims if self.gcn else None},
        }
        body = self.encoder.to_bytes() + (self.gcn.to_bytes() if self.gcn else b"")
        return checkpoint.dumps(header, []) + body

    @classmethod
    def from_bytes(cls, blob, graph=None, class_map=None):
        header, _, used = checkpoint.loads(blob)
        if header.get("kind") != "gpn":
            raise checkpoint.CheckpointError("not a GPN checkpoint")
        rest = blob[used:]
        encoder, used = Encoder._decode(rest)
        rest = rest[used:]
        gcn = None
        if header["dims"]["gcn"] is not None:
            gcn, used = GcnModel._decode(rest)
            rest = rest[used:]
        if rest:
            raise checkpoint.CheckpointError("trailing bytes after model checkpoint")
        return cls(encoder, gcn, graph, class_map, header["lambda"],
                   header["distance_mode"], header.get("graph_mode", "gcn"))


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model.to_bytes())


def load_model(path, graph=None, class_map=None):
    with open(path, "rb") as fh:
        return GpnModel.from_bytes(fh.read(), graph, class_map)


@dataclass
class PrototypeSet:
    classes: tuple
    e_spe: Tensor
    e_share: Tensor | None
    e_mixed: Tensor


def _class_means(emb, n_way, k_shot):
    """Row n = mean of rows n*K .. n*K+K-1 (support is class-major)."""
    return stack_rows([row_mean(take_rows(emb, range(n * k_shot, (n + 1) * k_shot))) for n in range(n_way)])


def task_specific_prototypes(model, episode, support_emb=None):
    if support_emb is None:
        support_emb = model.encoder(episode.support_x)
    return _class_means(support_emb, episode.n_way, episode.k_shot)


def mix_prototypes(model, e_spe, e_share, classes=()):
    if e_share is None:
        if model.lam != 1.0:
            raise ValueError("no task-shared prototypes to mix with")
        return PrototypeSet(tuple(classes), e_spe, None, e_spe)
    if e_spe.shape != e_share.shape:
        raise ValueError(f"prototype shapes differ: {e_spe.shape} vs {e_share.shape}")
    mixed = axpby(model.lam, e_spe, 1.0 - model.lam, e_share)
    return PrototypeSet(tuple(classes), e_spe, e_share, mixed)


def _embed(model, episode):
    both = np.concatenate([episode.support_x, episode.query_x])
    emb = model.encoder(both)
    ns = len(episode.support_x)
    return take_rows(emb, range(ns)), take_rows(emb, range(ns, len(both)))


def prototypes(model, episode, share_all=None, support_emb=None):
    e_spe = task_specific_prototypes(model, episode, support_emb)
    e_share = None
    if model.gcn is not None:
        if share_all is None:
            share_all = model.shared_all()
        e_share = select_prototypes(share_all, model.class_map, episode.class_ids)
    return mix_prototypes(model, e_spe, e_share, episode.class_ids)


def distances(model, query_emb, protos):
    d = pairwise_sq_dist(query_emb, protos.e_mixed)
    if model.distance_mode == "unsquared":
        d = sqrt(d)
    return d


def _logits(model, episode, share_all=None):
    s_emb, q_emb = _embed(model, episode)
    protos = prototypes(model, episode, share_all, s_emb)
    return scale(distances(model, q_emb, protos), -1.0)


def classify(model, episode, protos=None, query_emb=None):
    """Posterior ``P(y = n | x)`` for every query, as an array ``Q x N``."""
    if protos is None:
        return softmax_rows(_logits(model, episode).data)
    if len(protos.classes) and tuple(protos.classes) != tuple(episode.class_ids):
        raise ValueError("prototypes were computed for different classes")
    if protos.e_mixed.shape[0] != episode.n_way:
        raise ValueError(f"{protos.e_mixed.shape[0]} prototypes for a {episode.n_way}-way episode")
    if query_emb is None:
        query_emb = model.encoder(episode.query_x)
    return softmax_rows(scale(distances(model, query_emb, protos), -1.0).data)


def episode_loss(model, episode, share_all=None):
    return softmax_cross_entropy(_logits(model, episode, share_all), episode.query_y)


def argmax_rows(posterior):
    """Row-wise argmax; exact ties go to the lowest index."""
    return np.argmax(np.asarray(posterior), axis=1)


def predict(model, episode, share_all=None):
    """Predicted global class id for each query."""
    post = softmax_rows(_logits(model, episode, share_all).data)
    return np.asarray(episode.class_ids)[argmax_rows(post)]


def episode_accuracy(model, episode, share_all=None):
    pred = predict(model, episode, share_all)
    return float(np.mean(pred == episode.true_classes()))
