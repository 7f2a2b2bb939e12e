"""Concept graph: word vectors over a taxonomy, with a row-normalised adjacency."""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_WORD_DIM = 300


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ConceptGraph:
    """Undirected concept graph with self-loops.

    ``norm_adj`` is D^-1 A where A is the symmetric adjacency including
    self-loops and D its degree matrix, so every row sums to one.
    """

    node_names: tuple
    word_vectors: np.ndarray  # L x J
    edges: frozenset  # unordered index pairs (i < j), self-loops excluded
    adjacency: np.ndarray = field(repr=False)
    norm_adj: np.ndarray = field(repr=False)

    @property
    def node_count(self):
        return len(self.node_names)

    @property
    def word_dim(self):
        return self.word_vectors.shape[1]

    def index(self, name):
        return self._index[name]

    @property
    def _index(self):
        idx = self.__dict__.get("_index_cache")
        if idx is None:
            idx = {n: i for i, n in enumerate(self.node_names)}
            object.__setattr__(self, "_index_cache", idx)
        return idx

    def degree(self, i):
        return int(self.adjacency[i].sum())

    def neighbours(self, i):
        return [j for j in np.flatnonzero(self.adjacency[i]) if j != i]

    def edge_names(self):
        """Edges as sorted name pairs, in a deterministic order."""
        return sorted((self.node_names[i], self.node_names[j]) for i, j in self.edges)


def _normalise(adjacency):
    deg = adjacency.sum(axis=1)
    return adjacency / deg[:, None]


def _assemble(names, vectors, edge_idx):
    n = len(names)
    adj = np.eye(n)
    for i, j in edge_idx:
        adj[i, j] = 1.0
        adj[j, i] = 1.0
    return ConceptGraph(
        node_names=tuple(names),
        word_vectors=vectors,
        edges=frozenset(edge_idx),
        adjacency=adj,
        norm_adj=_normalise(adj),
    )


def build_graph(edge_list, vectors, nodes=None):
    """Build a graph from name pairs and a ``name -> vector`` table.

    Nodes are every edge endpoint plus ``nodes`` (for isolated nodes); when
    neither yields anything, all names in ``vectors`` are used. Node order is
    lexicographic by name.
    """
    edge_list = [tuple(e) for e in edge_list]
    names = set()
    for a, b in edge_list:
        names.add(a)
        names.add(b)
    if nodes is not None:
        names.update(nodes)
    if not names:
        names = set(vectors)
    if len(names) > 1 and not edge_list:
        raise GraphError(f"empty edge list with {len(names)} nodes")
    missing = sorted(n for n in names if n not in vectors)
    if missing:
        raise GraphError(f"no word vector for node(s): {', '.join(missing)}")
    names = sorted(names)
    dims = {len(np.ravel(vectors[n])) for n in names}
    if len(dims) != 1:
        raise GraphError(f"inconsistent word-vector dimensions: {sorted(dims)}")
    mat = np.array([np.ravel(vectors[n]) for n in names], dtype=np.float64)

    pos = {n: i for i, n in enumerate(names)}
    edge_idx = set()
    for a, b in edge_list:
        i, j = pos[a], pos[b]
        if i != j:
            edge_idx.add((min(i, j), max(i, j)))
    graph = _assemble(names, mat, edge_idx)
    if not is_connected(graph):
        log.warning("concept graph has %d connected components", len(components(graph)))
    return graph


def components(graph):
    seen = np.zeros(graph.node_count, dtype=bool)
    comps = []
    for start in range(graph.node_count):
        if seen[start]:
            continue
        comp = []
        queue = deque([start])
        seen[start] = True
        while queue:
            i = queue.popleft()
            comp.append(i)
            for j in graph.neighbours(i):
                if not seen[j]:
                    seen[j] = True
                    queue.append(j)
        comps.append(sorted(comp))
    return comps


def is_connected(graph):
    return len(components(graph)) <= 1


def check_reachability(graph, class_map, train_classes, other_classes):
    """Warn about classes whose node shares no component with any training class.

    Returns the list of unreachable class ids.
    """
    comp_of = {}
    for k, comp in enumerate(components(graph)):
        for i in comp:
            comp_of[i] = k
    train_comps = {comp_of[class_map[c]] for c in train_classes}
    bad = [c for c in other_classes if comp_of[class_map[c]] not in train_comps]
    if bad:
        log.warning("classes unreachable from any training class: %s", bad)
    return bad


def map_classes(graph, class_names):
    """Map class id (position in ``class_names``) to node index."""
    dupes = sorted({n for n in class_names if class_names.count(n) > 1})
    if dupes:
        raise GraphError(f"duplicate class names: {', '.join(dupes)}")
    misses = [n for n in class_names if n not in graph._index]
    if misses:
        raise GraphError(f"class name(s) not in graph: {', '.join(misses)}")
    return {cid: graph.index(name) for cid, name in enumerate(class_names)}


def randomize_vectors(graph, seed):
    """Same structure, word vectors replaced by i.i.d. standard normals."""
    rng = np.random.default_rng(seed)
    return replace(graph, word_vectors=rng.standard_normal(graph.word_vectors.shape))


def without_edges(graph):
    """Same nodes and vectors, self-loops only."""
    return _assemble(graph.node_names, graph.word_vectors, set())


# ---------------------------------------------------------------- files


def write_edge_list(graph, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# concept graph edges: parent<TAB>child\n")
        for a, b in graph.edge_names():
            fh.write(f"{a}\t{b}\n")


def read_edge_list(path):
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise GraphError(f"{path}:{lineno}: expected two TAB-separated names")
            edges.append((parts[0], parts[1]))
    return edges


def write_word_vectors(graph, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{graph.node_count} {graph.word_dim}\n")
        for name, vec in zip(graph.node_names, graph.word_vectors):
            fh.write(name + "\t" + " ".join(repr(float(v)) for v in vec) + "\n")


def read_word_vectors(path):
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise GraphError(f"{path}: header must be 'count dim'")
        count, dim = int(header[0]), int(header[1])
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            name, _, rest = line.partition("\t")
            vals = [float(v) for v in rest.split(" ")]
            if len(vals) != dim:
                raise GraphError(f"{path}:{lineno}: expected {dim} values, got {len(vals)}")
            if not all(math.isfinite(v) for v in vals):
                raise GraphError(f"{path}:{lineno}: non-finite value")
            vectors[name] = np.array(vals)
    if len(vectors) != count:
        raise GraphError(f"{path}: header says {count} vectors, found {len(vectors)}")
    return vectors


def load_graph(edge_path, vector_path):
    vectors = read_word_vectors(Path(vector_path))
    return build_graph(read_edge_list(Path(edge_path)), vectors, nodes=list(vectors))
