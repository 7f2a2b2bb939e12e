"""Episodic training, evaluation with confidence intervals, lambda sweeps, ablations."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import kg
from .autodiff import Tape, backward
from .episodes import DEFAULT_QUERY, Setting, episode_at
from .gcn import init_gcn
from .model import GpnModel, episode_accuracy, episode_loss, init_encoder
from .optim import StepDecay, make_optimizer

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    n_way: int = 5
    k_shot: int = 1
    n_query: int = DEFAULT_QUERY
    setting: str = "src+tgt"
    lam: float = 0.5
    encoder_opt: str = "sgd"
    encoder_lr: float = 0.001
    momentum: float = 0.9
    gcn_opt: str = "adam"
    gcn_lr: float = 0.005
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    decay_every: int = 2000
    decay_factor: float = 0.5
    val_every: int = 250
    val_episodes: int = 200
    seed: int = 0  # training episode stream
    init_seed: int = 0  # weight initialisation
    val_seed: int = 1

    def validate(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.encoder_lr <= 0 or self.gcn_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_every <= 0 or self.val_every <= 0 or self.val_episodes <= 0:
            raise ValueError("decay_every, val_every and val_episodes must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if min(self.n_way, self.k_shot, self.n_query) < 1:
            raise ValueError("n_way, k_shot and n_query must be positive")
        Setting.parse(self.setting)
        for opt in (self.encoder_opt, self.gcn_opt):
            if opt not in ("sgd", "adam"):
                raise ValueError(f"unknown optimizer {opt!r}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown train config keys: {unknown}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# named, versioned training presets
PRESETS = {
    # synthetic benchmarks; 0.01 on the encoder diverges with squared distances
    "desk-v1": TrainConfig(),
    # Office-Home protocol: 5000 iterations, 1e-3 / 5e-3, halved every 2000
    "office-home": TrainConfig(iterations=5000, encoder_opt="adam", encoder_lr=0.001,
                               gcn_lr=0.005, decay_every=2000, decay_factor=0.5),
    # miniImageNet protocol: SGD 0.1, momentum 0.9, 40000 iterations, /10 every 10000
    "miniimagenet": TrainConfig(iterations=40000, encoder_opt="sgd", encoder_lr=0.1,
                                gcn_lr=0.005, decay_every=10000, decay_factor=0.1),
}


@dataclass
class EvalReport:
    n: int
    mean: float
    ci95: float
    accuracies: list = field(repr=False, default_factory=list)

    @classmethod
    def from_accuracies(cls, accs):
        accs = [float(a) for a in accs]
        n = len(accs)
        if n == 0:
            raise ValueError("no episodes evaluated")
        mean = math.fsum(accs) / n
        if n > 1:
            var = math.fsum((a - mean) ** 2 for a in accs) / (n - 1)
            ci = 1.96 * math.sqrt(var) / math.sqrt(n)
        else:
            ci = 0.0
        return cls(n, mean, ci, accs)

    def to_json(self):
        return json.dumps({"n": self.n, "mean": self.mean, "ci95": self.ci95}, sort_keys=True)

    def to_csv(self):
        return "episode,accuracy\n" + "".join(f"{i},{a!r}\n" for i, a in enumerate(self.accuracies))

    def overlaps(self, other):
        return not (self.mean - self.ci95 > other.mean + other.ci95 or
                    other.mean - other.ci95 > self.mean + self.ci95)


@dataclass
class ModelSpec:
    """What to build before training: dims, seeds and variant switches."""

    encoder_dims: tuple = (32, 64, 32)
    gcn_hidden: tuple = (64,)
    lam: float = 0.5
    distance_mode: str = "squared"
    graph_mode: str = "gcn"  # or "fc"
    use_gcn: bool = True
    init_seed: int = 0


def build_model(graph, class_map, spec):
    """Encoder and GCN draw from independent seed streams, so the encoder init
    does not depend on whether a GCN is built."""
    enc_seed, gcn_seed = np.random.SeedSequence(spec.init_seed).spawn(2)
    encoder = init_encoder(spec.encoder_dims, enc_seed)
    gcn = None
    if spec.use_gcn:
        dims = [graph.word_dim, *spec.gcn_hidden, encoder.output_dim]
        gcn = init_gcn(dims, gcn_seed)
        gcn.seed = spec.init_seed
    return GpnModel(encoder, gcn, graph, class_map, spec.lam,
                    spec.distance_mode, spec.graph_mode)


def _optimizers(model, config):
    enc = make_optimizer(config.encoder_opt, model.encoder.parameters(), config.encoder_lr,
                         config.momentum, config.betas, config.eps)
    gcn = None
    if model.gcn is not None:
        gcn = make_optimizer(config.gcn_opt, model.gcn.parameters(), config.gcn_lr,
                             config.momentum, config.betas, config.eps)
    return enc, gcn


def train(model, data, config, on_log=None):
    """Episodic training; the best validation checkpoint is restored at the end.

    Returns ``(model, log_rows)``. Each row is a dict with ``iter``, ``loss``,
    ``lr_encoder``, ``lr_gcn`` and, on validation steps, ``val_acc``.
    """
    config.validate()
    if model.lam != config.lam:
        raise ValueError(f"model lambda {model.lam} differs from config lambda {config.lam}")
    setting = Setting.parse(config.setting)
    data.check_capacity("train", config.n_way, config.k_shot, config.n_query, setting)
    # the validation split may hold fewer classes than n_way
    val_way = min(config.n_way, len(data.splits["val"]))
    enc_opt, gcn_opt = _optimizers(model, config)
    enc_sched = StepDecay(config.encoder_lr, config.decay_every, config.decay_factor)
    gcn_sched = StepDecay(config.gcn_lr, config.decay_every, config.decay_factor)
    rows = []
    best_acc, best_params = -1.0, None
    for it in range(config.iterations):
        enc_opt.lr = enc_sched(it)
        if gcn_opt is not None:
            gcn_opt.lr = gcn_sched(it)
        ep = episode_at(data, "train", config.n_way, config.k_shot, config.n_query, setting, config.seed, it)
        model.zero_grad()
        with Tape():
            loss = episode_loss(model, ep)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at iteration {it}")
            backward(loss)
        enc_opt.step()
        if gcn_opt is not None:
            gcn_opt.step()
        row = {"iter": it, "loss": value, "lr_encoder": enc_opt.lr,
               "lr_gcn": gcn_opt.lr if gcn_opt is not None else None}
        if (it + 1) % config.val_every == 0 or it + 1 == config.iterations:
            rep = evaluate(model, data, "val", val_way, config.k_shot, config.n_query,
                           config.val_episodes, config.val_seed)
            row["val_acc"] = rep.mean
            if rep.mean > best_acc:
                best_acc, best_params = rep.mean, model.param_vector()
        rows.append(row)
        if on_log is not None:
            on_log(row)
    model.zero_grad()
    if best_params is not None:
        model.load_param_vector(best_params)
    return model, rows


# ---------------------------------------------------------------- evaluation

_worker_state = {}


def _init_worker(model, data, share, args):
    _worker_state.update(model=model, data=data, share=share, args=args)


def _eval_chunk(indices):
    st = _worker_state
    return _accuracies(st["model"], st["data"], st["share"], st["args"], indices)


def _accuracies(model, data, share, args, indices):
    split, n_way, k_shot, n_query, seed = args
    out = []
    for i in indices:
        ep = episode_at(data, split, n_way, k_shot, n_query, Setting.FULLTGT, seed, i)
        out.append(episode_accuracy(model, ep, share))
    return out


def evaluate(model, data, split="test", n_way=5, k_shot=1, n_query=DEFAULT_QUERY,
             episodes=1000, seed=0, workers=1):
    """Mean accuracy and 95% CI over ``episodes`` target-domain episodes.

    Episode ``i`` always comes from the same RNG substream, so any worker
    count gives the same report.
    """
    share = model.shared_all()  # one graph pass; no tape is active here
    args = (split, n_way, k_shot, n_query, seed)
    data.check_capacity(split, n_way, k_shot, n_query, Setting.FULLTGT)
    if workers <= 1:
        accs = _accuracies(model, data, share, args, range(episodes))
    else:
        chunks = [list(c) for c in np.array_split(np.arange(episodes), workers) if len(c)]
        with ProcessPoolExecutor(workers, initializer=_init_worker,
                                 initargs=(model, data, share, args)) as pool:
            accs = [a for part in pool.map(_eval_chunk, chunks) for a in part]
    return EvalReport.from_accuracies(accs)


# ---------------------------------------------------------------- experiments


@dataclass
class Experiment:
    """Everything needed to train and test one model variant.

    With ``trials > 1`` the model is retrained from independent init and
    episode seeds and the per-episode test accuracies of all trials are
    pooled into one report.
    """

    data: object
    graph: kg.ConceptGraph
    class_map: dict
    config: TrainConfig
    spec: ModelSpec = field(default_factory=ModelSpec)
    test_episodes: int = 1000
    test_seed: int = 12345
    trials: int = 1

    def trial_seeds(self, t):
        if t == 0:
            return self.spec.init_seed, self.config.seed
        return self.spec.init_seed + 1000 * t, self.config.seed + 1000 * t

    def run(self, spec=None, graph=None, config=None):
        spec = spec or self.spec
        config = config or self.config
        accs = []
        for t in range(self.trials):
            init_seed, ep_seed = self.trial_seeds(t)
            model = build_model(graph or self.graph, self.class_map, replace(spec, init_seed=init_seed))
            train(model, self.data, replace(config, seed=ep_seed))
            rep = evaluate(model, self.data, "test", config.n_way, config.k_shot, config.n_query,
                           self.test_episodes, self.test_seed)
            accs.extend(rep.accuracies)
        return EvalReport.from_accuracies(accs)


def sweep_lambda(experiment, grid):
    """Train and test one model per lambda, in grid order, with shared seeds."""
    rows = []
    for lam in grid:
        lam = float(lam)
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda {lam} outside [0, 1]")
        spec = replace(experiment.spec, lam=lam)
        cfg = replace(experiment.config, lam=lam)
        rows.append((lam, experiment.run(spec=spec, config=cfg)))
    return rows


ABLATIONS = ("rand", "fc")


def run_ablation(experiment, kind, seed=0):
    """``rand``: random GCN input vectors; ``fc``: GCN layers without propagation."""
    if kind == "rand":
        return experiment.run(graph=kg.randomize_vectors(experiment.graph, seed))
    if kind == "fc":
        return experiment.run(spec=replace(experiment.spec, graph_mode="fc"))
    raise ValueError(f"unknown ablation {kind!r}; choose from {ABLATIONS}")


def protonet_run(experiment):
    """Same experiment with no GCN at all and lambda = 1."""
    spec = replace(experiment.spec, lam=1.0, use_gcn=False)
    return experiment.run(spec=spec, config=replace(experiment.config, lam=1.0))
