"""Command-line entry point: ``proto-shift {synth,train,eval,sweep,ablate}``.

Data goes to files or stdout, diagnostics to stderr. Exit codes: 0 on
success, 1 when the work itself fails, 2 for usage or configuration errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import synth, trainer
from .checkpoint import CheckpointError
from .episodes import CapacityError, EpisodeError
from .model import load_model, save_model

log = logging.getLogger("proto_shift")

SEED_ENV = "PROTO_SHIFT_SEED"
DEFAULT_GRID = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything ``train``, ``sweep`` and ``ablate`` need, loadable from JSON.

    ``train`` holds TrainConfig overrides applied on top of the named
    ``preset``. The encoder maps the dataset's feature dim through
    ``encoder_hidden`` to ``embed_dim``; the GCN maps word vectors through
    ``gcn_hidden`` to the same ``embed_dim``.
    """

    data: str | None = None
    out: str = "run"
    preset: str = "desk-v1"
    train: dict = field(default_factory=dict)
    encoder_hidden: list = field(default_factory=lambda: [64])
    gcn_hidden: list = field(default_factory=lambda: [64])
    embed_dim: int = 32
    distance_mode: str = "squared"
    test_episodes: int = 1000
    test_seed: int = 12345
    trials: int = 1
    workers: int = 1

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown run config keys: {unknown}")
        return cls(**d).validate()

    def validate(self):
        if not isinstance(self.train, dict):
            raise ConfigError("'train' must be a JSON object")
        if self.preset not in trainer.PRESETS:
            raise ConfigError(f"unknown training preset {self.preset!r}; choose from {sorted(trainer.PRESETS)}")
        try:
            self.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self.distance_mode not in ("squared", "unsquared"):
            raise ConfigError(f"distance_mode must be squared or unsquared, got {self.distance_mode!r}")
        dims = [*self.encoder_hidden, *self.gcn_hidden, self.embed_dim]
        if not all(isinstance(d, int) and d > 0 for d in dims):
            raise ConfigError("layer sizes must be positive integers")
        for name in ("test_episodes", "trials", "workers"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        return self

    def train_config(self):
        base = trainer.PRESETS[self.preset].to_dict()
        unknown = sorted(set(self.train) - set(base))
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        base.update(self.train)
        return trainer.TrainConfig.from_dict(base).validate()

    def model_spec(self, feature_dim):
        cfg = self.train_config()
        return trainer.ModelSpec(
            encoder_dims=(feature_dim, *self.encoder_hidden, self.embed_dim),
            gcn_hidden=tuple(self.gcn_hidden),
            lam=cfg.lam,
            distance_mode=self.distance_mode,
            init_seed=cfg.init_seed,
        )


def _env_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def resolve_run_config(args):
    """File values, then the seed env var for unset seeds, then flags."""
    raw = _read_json(args.config) if args.config else {}
    raw = dict(raw)
    train = dict(raw.get("train", {}))
    seed = args.seed if args.seed is not None else None
    if seed is None and "seed" not in train:
        seed = _env_seed()
    if seed is not None:
        train["seed"] = seed
        train["init_seed"] = seed
    for flag, key in (("lam", "lam"), ("k_shot", "k_shot"), ("n_way", "n_way"),
                      ("iterations", "iterations"), ("setting", "setting")):
        value = getattr(args, flag, None)
        if value is not None:
            train[key] = value
    raw["train"] = train
    for flag in ("data", "out", "preset", "workers", "trials", "test_episodes"):
        value = getattr(args, flag, None)
        if value is not None:
            raw[flag] = value
    return RunConfig.from_dict(raw)


def _load_bench(path):
    if path is None:
        raise ConfigError("no benchmark given; pass --data or set 'data' in the config")
    data, graph, class_map, _ = synth.load_benchmark(path)
    return data, graph, class_map


def _write_text(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _csv(rows):
    return "param,mean,ci95\n" + "".join(f"{p},{r.mean!r},{r.ci95!r}\n" for p, r in rows)


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    if args.config:
        try:
            cfg = synth.SynthConfig.from_dict(_read_json(args.config))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
    else:
        if args.preset not in synth.PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(synth.PRESETS)}")
        cfg = synth.PRESETS[args.preset]
    seed = args.seed if args.seed is not None else _env_seed()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return _run(lambda: _synth_work(cfg, Path(args.out)))


def _synth_work(cfg, out):
    out.mkdir(parents=True, exist_ok=True)
    tax, data, _ = synth.generate(cfg)
    synth.write_benchmark(data, tax.graph, out, cfg)
    log.info("wrote %d samples, %d classes to %s", len(data), len(data.class_names), out)


def cmd_train(args):
    run = resolve_run_config(args)
    return _run(lambda: _train_work(run))


def _train_work(run):
    data, graph, class_map = _load_bench(run.data)
    cfg = run.train_config()
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    model = trainer.build_model(graph, class_map, run.model_spec(data.feature_dim))
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        def on_log(row):
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            if "val_acc" in row:
                log.info("iter %d loss %.4f val %.4f", row["iter"], row["loss"], row["val_acc"])
        trainer.train(model, data, cfg, on_log)
    save_model(model, out / "model.ckpt")
    # the fully resolved config, so the run can be repeated from this file alone
    resolved = asdict(replace(run, train=cfg.to_dict()))
    (out / "run_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")


def cmd_eval(args):
    seed = args.seed if args.seed is not None else _env_seed()
    seed = 12345 if seed is None else seed
    if args.episodes < 1 or args.workers < 1:
        raise ConfigError("--episodes and --workers must be positive")
    return _run(lambda: _eval_work(args, seed))


def _eval_work(args, seed):
    data, graph, class_map = _load_bench(args.data)
    model = load_model(args.checkpoint, graph, class_map)
    rep = trainer.evaluate(model, data, args.split, args.n_way, args.k_shot, args.n_query,
                           args.episodes, seed, args.workers)
    sys.stdout.write(rep.to_json() + "\n")
    if args.csv:
        Path(args.csv).write_text(rep.to_csv(), encoding="utf-8")


def _experiment(run):
    data, graph, class_map = _load_bench(run.data)
    return trainer.Experiment(data, graph, class_map, run.train_config(),
                              run.model_spec(data.feature_dim), run.test_episodes,
                              run.test_seed, run.trials)


def _parse_grid(text):
    try:
        grid = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"grid must be comma-separated numbers, got {text!r}") from None
    if not grid or any(not 0.0 <= g <= 1.0 for g in grid):
        raise ConfigError("grid values must lie in [0, 1]")
    return grid


def cmd_sweep(args):
    run = resolve_run_config(args)
    grid = _parse_grid(args.grid)
    return _run(lambda: _write_text(args.csv, _csv(trainer.sweep_lambda(_experiment(run), grid))))


def cmd_ablate(args):
    run = resolve_run_config(args)
    kinds = [k.strip() for k in args.kind.split(",") if k.strip()]
    bad = [k for k in kinds if k not in trainer.ABLATIONS]
    if bad or not kinds:
        raise ConfigError(f"ablation kinds must be among {trainer.ABLATIONS}, got {args.kind!r}")

    def work():
        exp = _experiment(run)
        seed = exp.config.seed
        _write_text(args.csv, _csv([(k, trainer.run_ablation(exp, k, seed)) for k in kinds]))

    return _run(work)


_RUNTIME_ERRORS = (OSError, CheckpointError, CapacityError, EpisodeError,
                   trainer.TrainingDiverged, ValueError, KeyError)


def _run(work):
    try:
        work()
    except ConfigError:
        raise
    except _RUNTIME_ERRORS as exc:
        print(f"proto-shift: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- parser


def _add_run_flags(p):
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--data", help="benchmark directory or manifest path")
    p.add_argument("--out", help="output directory")
    p.add_argument("--preset", help="training preset name")
    p.add_argument("--seed", type=int, help="episode and init seed")
    p.add_argument("--lam", type=float, help="mixing weight lambda")
    p.add_argument("--n-way", type=int)
    p.add_argument("--k-shot", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--setting", choices=["tgt", "src+tgt", "fulltgt"])
    p.add_argument("--trials", type=int)
    p.add_argument("--test-episodes", type=int)
    p.add_argument("--workers", type=int, help="evaluation processes")


def build_parser():
    parser = argparse.ArgumentParser(prog="proto-shift", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("--preset", default="hard-shift")
    p.add_argument("--config", help="synth config JSON (overrides --preset)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a benchmark")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on test episodes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--k-shot", type=int, default=1)
    p.add_argument("--n-query", type=int, default=15)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--csv", help="also write per-episode accuracies here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and test one model per lambda")
    _add_run_flags(p)
    p.add_argument("--grid", default=DEFAULT_GRID)
    p.add_argument("--csv", help="output CSV (default stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="run the rand and/or fc ablations")
    _add_run_flags(p)
    p.add_argument("--kind", default="rand,fc")
    p.add_argument("--csv", help="output CSV (default stdout)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"proto-shift: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
