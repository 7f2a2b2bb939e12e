"""N-way K-shot episode construction under the tgt / src+tgt / fulltgt settings.

Training pools per setting (T = target domain, C_t = classes with target
samples available for training):

* ``tgt``      target-domain samples of C_t only
* ``src+tgt``  every auxiliary-domain sample of the training classes, plus
               target-domain samples of C_t
* ``fulltgt``  target-domain samples of every training class

Validation and test episodes always draw target-domain samples only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

DEFAULT_QUERY = 15
SPLITS = ("train", "val", "test")


class Setting(str, Enum):
    TGT = "tgt"
    SRC_TGT = "src+tgt"
    FULLTGT = "fulltgt"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown shift setting {value!r}; expected tgt, src+tgt or fulltgt") from None


class CapacityError(ValueError):
    """Not enough classes or samples to build the requested episode."""


class EpisodeError(ValueError):
    pass


class DisjointnessError(EpisodeError):
    pass


class CardinalityError(EpisodeError):
    pass


class MembershipError(EpisodeError):
    pass


class DuplicateClassError(EpisodeError):
    pass


class FeatureDataset:
    """Labelled, domain-tagged feature rows with class-disjoint splits.

    Arrays are made read-only; eligible sample pools for each split/setting
    pair are computed once here.
    """

    def __init__(self, features, labels, domains, splits, target_domain=0,
                 class_names=None, tgt_classes=None):
        features = np.array(features, dtype=np.float64)
        labels = np.array(labels, dtype=np.int64)
        domains = np.array(domains, dtype=np.int64)
        if features.ndim != 2 or len(features) != len(labels) or len(labels) != len(domains):
            raise ValueError("features, labels and domains must have matching lengths")
        splits = {k: sorted(int(c) for c in splits[k]) for k in SPLITS}
        for i, a in enumerate(SPLITS):
            for b in SPLITS[i + 1:]:
                both = set(splits[a]) & set(splits[b])
                if both:
                    raise ValueError(f"splits {a} and {b} share classes {sorted(both)}")
        if tgt_classes is None:
            tgt_classes = splits["train"]
        tgt_classes = sorted(int(c) for c in tgt_classes)
        if not set(tgt_classes) <= set(splits["train"]):
            raise ValueError("target training classes must be a subset of the train split")
        for arr in (features, labels, domains):
            arr.setflags(write=False)
        self.features = features
        self.labels = labels
        self.domains = domains
        self.splits = splits
        self.target_domain = int(target_domain)
        self.tgt_classes = tgt_classes
        n_classes = int(labels.max()) + 1 if len(labels) else 0
        self.class_names = list(class_names) if class_names is not None else [f"class{c}" for c in range(n_classes)]
        self._pools = {}
        for split in SPLITS:
            for setting in Setting:
                self._pools[split, setting] = self._build_pools(split, setting)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def __len__(self):
        return len(self.labels)

    def _build_pools(self, split, setting):
        on_target = self.domains == self.target_domain
        pools = {}
        for c in self.splits[split]:
            of_class = self.labels == c
            if split != "train" or setting is Setting.FULLTGT:
                mask = of_class & on_target
            elif setting is Setting.TGT:
                mask = of_class & on_target if c in self.tgt_classes else np.zeros_like(of_class)
            else:
                mask = of_class & ~on_target
                if c in self.tgt_classes:
                    mask |= of_class & on_target
            idx = np.flatnonzero(mask)
            if len(idx):
                pools[c] = idx
        return pools

    def pools(self, split, setting=Setting.FULLTGT):
        return self._pools[split, Setting.parse(setting)]

    def eligible_classes(self, split, setting, min_samples):
        return [c for c, idx in self.pools(split, setting).items() if len(idx) >= min_samples]

    def check_capacity(self, split, n_way, k_shot, n_query, setting):
        need = k_shot + n_query
        ok = self.eligible_classes(split, setting, need)
        if len(ok) < n_way:
            raise CapacityError(
                f"{split}/{Setting.parse(setting).value}: {len(ok)} classes have >= {need} samples, "
                f"{n_way} required"
            )
        return ok


@dataclass(frozen=True, eq=False)
class Episode:
    class_ids: tuple
    support_idx: np.ndarray  # N*K sample indices, class-major
    query_idx: np.ndarray  # N*q sample indices, class-major
    support_x: np.ndarray
    query_x: np.ndarray
    support_y: np.ndarray  # episode-local class index 0..N-1
    query_y: np.ndarray
    support_domains: np.ndarray
    query_domains: np.ndarray
    k_shot: int
    n_query: int
    split: str = "train"
    setting: Setting = Setting.FULLTGT

    @property
    def n_way(self):
        return len(self.class_ids)

    def true_classes(self):
        return np.asarray(self.class_ids)[self.query_y]


def sample_episode(data, split, n_way, k_shot, n_query=DEFAULT_QUERY,
                   setting=Setting.FULLTGT, rng=None):
    setting = Setting.parse(setting)
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    if n_way < 1 or k_shot < 1 or n_query < 1:
        raise ValueError("n_way, k_shot and n_query must be positive")
    rng = np.random.default_rng(rng)
    eligible = data.check_capacity(split, n_way, k_shot, n_query, setting)
    pools = data.pools(split, setting)
    chosen = rng.choice(np.asarray(eligible), size=n_way, replace=False)
    sup, qry = [], []
    for c in chosen:
        pick = rng.choice(pools[int(c)], size=k_shot + n_query, replace=False)
        sup.append(pick[:k_shot])
        qry.append(pick[k_shot:])
    sup = np.concatenate(sup)
    qry = np.concatenate(qry)
    return Episode(
        class_ids=tuple(int(c) for c in chosen),
        support_idx=sup,
        query_idx=qry,
        support_x=data.features[sup],
        query_x=data.features[qry],
        support_y=np.repeat(np.arange(n_way), k_shot),
        query_y=np.repeat(np.arange(n_way), n_query),
        support_domains=data.domains[sup],
        query_domains=data.domains[qry],
        k_shot=k_shot,
        n_query=n_query,
        split=split,
        setting=setting,
    )


def episode_rng(seed, index):
    """Independent generator for episode ``index`` of the stream seeded by ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def episode_at(data, split, n_way, k_shot, n_query, setting, seed, index):
    return sample_episode(data, split, n_way, k_shot, n_query, setting, episode_rng(seed, index))


def episode_stream(data, split, n_way, k_shot, n_query=DEFAULT_QUERY,
                   setting=Setting.FULLTGT, seed=0, count=1000, start=0):
    for i in range(start, start + count):
        yield episode_at(data, split, n_way, k_shot, n_query, setting, seed, i)


def validate_episode(ep, data=None):
    """Raise an ``EpisodeError`` subclass on any broken episode invariant."""
    n = len(ep.class_ids)
    if len(set(ep.class_ids)) != n:
        raise DuplicateClassError(f"episode classes repeat: {ep.class_ids}")
    if len(ep.support_idx) != n * ep.k_shot or len(ep.support_y) != n * ep.k_shot:
        raise CardinalityError(f"support has {len(ep.support_idx)} samples, expected {n * ep.k_shot}")
    if len(ep.query_idx) != n * ep.n_query or len(ep.query_y) != n * ep.n_query:
        raise CardinalityError(f"query has {len(ep.query_idx)} samples, expected {n * ep.n_query}")
    for name, ys, per in (("support", ep.support_y, ep.k_shot), ("query", ep.query_y, ep.n_query)):
        counts = np.bincount(ys, minlength=n) if len(ys) else np.zeros(n, dtype=int)
        if len(counts) != n or (counts != per).any():
            raise CardinalityError(f"{name} per-class counts {counts.tolist()}, expected {per} each")
    if len(set(ep.support_idx.tolist())) != len(ep.support_idx) or len(set(ep.query_idx.tolist())) != len(ep.query_idx):
        raise DisjointnessError("a sample appears twice within the support or query set")
    if set(ep.support_idx.tolist()) & set(ep.query_idx.tolist()):
        raise DisjointnessError("support and query share a sample")
    if data is not None:
        allowed = set(ep.class_ids)
        got = set(data.labels[ep.support_idx].tolist()) | set(data.labels[ep.query_idx].tolist())
        if not got <= allowed:
            raise MembershipError(f"samples of classes {sorted(got - allowed)} outside {sorted(allowed)}")
        cls = np.asarray(ep.class_ids)
        if (data.labels[ep.support_idx] != cls[ep.support_y]).any() or (data.labels[ep.query_idx] != cls[ep.query_y]).any():
            raise MembershipError("episode-local labels disagree with dataset labels")
        if not allowed <= set(data.splits[ep.split]):
            raise MembershipError(f"classes {sorted(allowed - set(data.splits[ep.split]))} not in split {ep.split}")


# ---------------------------------------------------------------- manifest


def load_manifest(path):
    """Read a dataset manifest; returns ``(FeatureDataset, manifest dict)``."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        man = json.load(fh)
    required = ("feature_file", "feature_dim", "count", "labels_file", "domains_file",
                "class_names", "splits", "target_domain")
    missing = [k for k in required if k not in man]
    if missing:
        raise ValueError(f"{path}: manifest missing keys {missing}")
    root = path.parent
    dim, count = int(man["feature_dim"]), int(man["count"])
    raw = np.fromfile(root / man["feature_file"], dtype="<f4")
    if raw.size != dim * count:
        raise ValueError(f"{man['feature_file']}: expected {count}x{dim} floats, found {raw.size}")
    labels = _read_ints(root / man["labels_file"])
    domains = _read_ints(root / man["domains_file"])
    if len(labels) != count or len(domains) != count:
        raise ValueError("labels/domains length does not match count")
    data = FeatureDataset(
        raw.reshape(count, dim).astype(np.float64),
        labels,
        domains,
        man["splits"],
        target_domain=man["target_domain"],
        class_names=man["class_names"],
        tgt_classes=man.get("tgt_train_classes"),
    )
    return data, man


def write_manifest(data, directory, extra=None):
    """Write features/labels/domains and the manifest JSON into ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"output directory {directory} does not exist")
    np.asarray(data.features, dtype="<f4").tofile(directory / "features.f32")
    _write_ints(directory / "labels.txt", data.labels)
    _write_ints(directory / "domains.txt", data.domains)
    man = {
        "feature_file": "features.f32",
        "feature_dim": data.feature_dim,
        "count": len(data),
        "labels_file": "labels.txt",
        "domains_file": "domains.txt",
        "class_names": list(data.class_names),
        "splits": {k: list(data.splits[k]) for k in SPLITS},
        "target_domain": data.target_domain,
        "tgt_train_classes": list(data.tgt_classes),
    }
    if extra:
        man.update(extra)
    with open(directory / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return man


def _read_ints(path):
    with open(path, encoding="utf-8") as fh:
        return [int(line) for line in fh if line.strip()]


def _write_ints(path, values):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{int(v)}\n" for v in values)
