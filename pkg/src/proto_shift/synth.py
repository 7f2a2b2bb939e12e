"""Desk-scale benchmarks with controllable domain shift and a semantic taxonomy.

A balanced tree supplies both the concept graph and the classes (its leaves).
Semantic vectors diffuse from the root (``child = parent + N(0, tau^2 I)``);
word vectors are semantic vectors plus a little noise. Each class's feature
mean is a fixed linear image of its leaf semantic vector, and each domain
applies its own orthogonal map and translation, both growing with ``gamma``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import kg
from .episodes import FeatureDataset, load_manifest, write_manifest

EDGE_FILE = "edges.tsv"
VECTOR_FILE = "vectors.txt"


@dataclass(frozen=True)
class SynthConfig:
    branching: int = 3
    depth: int = 3
    feature_dim: int = 32
    word_dim: int = 32
    domains: int = 3
    samples_per_class_per_domain: int = 40
    n_train: int = 16
    n_val: int = 4
    n_test: int = 6
    n_tgt_train: int = 6  # training classes that also have target-domain samples
    tau: float = 1.0  # semantic diffusion scale at the first tree level
    tau_decay: float = 1.0  # level l diffuses with tau * tau_decay ** (l - 1)
    sigma_c: float = 1.0  # within-class noise
    gamma: float = 0.5  # domain transform strength
    word_noise: float = 0.1
    target_domain: int = 0
    seed: int = 0

    def validate_tree(self):
        if self.branching < 2 or self.depth < 1:
            raise ValueError("taxonomy needs branching >= 2 and depth >= 1")
        if self.word_dim < 1 or min(self.tau, self.tau_decay, self.word_noise) < 0:
            raise ValueError("word_dim must be positive and taxonomy scales non-negative")
        return self

    def validate(self):
        self.validate_tree()
        leaves = self.branching ** self.depth
        need = self.n_train + self.n_val + self.n_test
        if leaves < need:
            raise ValueError(f"{leaves} leaves cannot hold {need} classes")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one class")
        if not 0 <= self.n_tgt_train <= self.n_train:
            raise ValueError("n_tgt_train must lie in [0, n_train]")
        if min(self.feature_dim, self.word_dim, self.domains, self.samples_per_class_per_domain) < 1:
            raise ValueError("dimensions, domain count and sample count must be positive")
        if min(self.tau, self.tau_decay, self.sigma_c, self.gamma, self.word_noise) < 0:
            raise ValueError("scales must be non-negative")
        if not 0 <= self.target_domain < self.domains:
            raise ValueError("target_domain out of range")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown synth config keys: {unknown}")
        return cls(**d)


# The named presets use a larger taxonomy than the bare defaults: with only
# 4 validation and 6 test classes, run-to-run spread swamps the effects the
# presets are meant to show. They differ only in the domain shift strength.
_PRESET_SCALE = dict(branching=4, depth=3, n_train=32, n_val=8, n_test=16, n_tgt_train=10,
                     word_dim=16, sigma_c=2.0, seed=0)

PRESETS = {
    "no-shift": SynthConfig(gamma=0.0, **_PRESET_SCALE),
    "easy-shift": SynthConfig(gamma=0.5, **_PRESET_SCALE),
    "hard-shift": SynthConfig(gamma=1.5, **_PRESET_SCALE),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


@dataclass(frozen=True, eq=False)
class Taxonomy:
    graph: kg.ConceptGraph
    leaves: tuple  # leaf node names in tree order
    parent: dict  # node name -> parent name (root absent)
    semantic: np.ndarray  # L x J, aligned with graph.node_names


def _node_name(path):
    return "t" + "".join(f"_{p}" for p in path)


def generate_taxonomy(config):
    config.validate_tree()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    J = config.word_dim
    sem = {(): rng.standard_normal(J)}
    parent = {}
    edges = []
    frontier = [()]
    for level in range(config.depth):
        step = config.tau * config.tau_decay ** level
        nxt = []
        for path in frontier:
            for b in range(config.branching):
                child = path + (b,)
                sem[child] = sem[path] + step * rng.standard_normal(J)
                parent[_node_name(child)] = _node_name(path)
                edges.append((_node_name(path), _node_name(child)))
                nxt.append(child)
        frontier = nxt
    names = {path: _node_name(path) for path in sem}
    words = {names[p]: v + config.word_noise * rng.standard_normal(J) for p, v in sem.items()}
    graph = kg.build_graph(edges, words, nodes=list(words))
    # graph.node_names is lexicographic; align semantic rows to it
    by_name = {names[p]: sem[p] for p in sem}
    semantic = np.array([by_name[n] for n in graph.node_names])
    return Taxonomy(graph, tuple(names[p] for p in frontier), parent, semantic)


def _orthogonal(rng, d, strength):
    """Cayley transform of a random skew-symmetric matrix; identity at strength 0."""
    g = rng.standard_normal((d, d)) / np.sqrt(d)
    a = strength * (g - g.T) / 2.0
    eye = np.eye(d)
    return np.linalg.solve(eye - a, eye + a)


def generate_dataset(config, taxonomy):
    """Returns ``(FeatureDataset, class_map)``."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
    graph = taxonomy.graph
    n_cls = config.n_train + config.n_val + config.n_test
    order = rng.permutation(len(taxonomy.leaves))[:n_cls]
    class_names = [taxonomy.leaves[i] for i in order]
    splits = {
        "train": list(range(config.n_train)),
        "val": list(range(config.n_train, config.n_train + config.n_val)),
        "test": list(range(config.n_train + config.n_val, n_cls)),
    }
    tgt_classes = sorted(rng.permutation(config.n_train)[:config.n_tgt_train].tolist())

    d = config.feature_dim
    embed = rng.standard_normal((d, config.word_dim)) / np.sqrt(config.word_dim)
    means = np.array([embed @ taxonomy.semantic[graph.index(n)] for n in class_names])
    transforms = []
    for _ in range(config.domains):
        rot = _orthogonal(rng, d, config.gamma)
        shift = config.gamma * rng.standard_normal(d)
        transforms.append((rot, shift))

    per = config.samples_per_class_per_domain
    feats, labels, domains = [], [], []
    for c in range(n_cls):
        for k, (rot, shift) in enumerate(transforms):
            centre = rot @ means[c] + shift
            feats.append(centre + config.sigma_c * rng.standard_normal((per, d)))
            labels += [c] * per
            domains += [k] * per
    # stored as float32 on disk; keep the in-memory copy identical
    features = np.concatenate(feats).astype(np.float32).astype(np.float64)
    data = FeatureDataset(features, labels, domains, splits, target_domain=config.target_domain,
                          class_names=class_names, tgt_classes=tgt_classes)
    return data, kg.map_classes(graph, class_names)


def generate(config):
    """Taxonomy, dataset and class map in one call."""
    tax = generate_taxonomy(config)
    data, class_map = generate_dataset(config, tax)
    return tax, data, class_map


def write_benchmark(data, graph, directory, config=None):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"output directory {directory} does not exist")
    kg.write_edge_list(graph, directory / EDGE_FILE)
    kg.write_word_vectors(graph, directory / VECTOR_FILE)
    extra = {"graph": {"edge_file": EDGE_FILE, "vector_file": VECTOR_FILE}}
    if config is not None:
        extra["synth"] = config.to_dict()
    return write_manifest(data, directory, extra)


def load_benchmark(directory):
    """Returns ``(data, graph, class_map, manifest)``; ``directory`` may be the manifest path."""
    path = Path(directory)
    if path.is_dir():
        path = path / "manifest.json"
    data, man = load_manifest(path)
    g = man.get("graph")
    if g is None:
        raise ValueError(f"{path}: manifest has no graph section")
    graph = kg.load_graph(path.parent / g["edge_file"], path.parent / g["vector_file"])
    class_map = kg.map_classes(graph, list(data.class_names))
    kg.check_reachability(graph, class_map, data.splits["train"], data.splits["val"] + data.splits["test"])
    return data, graph, class_map, man


def sibling_distance_gap(taxonomy):
    """Mean leaf-pair distance for siblings and for non-siblings."""
    g = taxonomy.graph
    leaves = list(taxonomy.leaves)
    vec = np.array([taxonomy.semantic[g.index(n)] for n in leaves])
    sib, non = [], []
    for i in range(len(leaves)):
        for j in range(i + 1, len(leaves)):
            dist = float(np.linalg.norm(vec[i] - vec[j]))
            (sib if taxonomy.parent[leaves[i]] == taxonomy.parent[leaves[j]] else non).append(dist)
    return float(np.mean(sib)), float(np.mean(non))
