"""Monte-Carlo experiment runner.

A JSON config names an environment, a list of algorithm variants and the
learner/exploration/schedule settings. Every variant is trained ``n_runs``
times; run ``i`` of every variant draws from the same seed (split off the
master seed by counter), so variants are compared on common random numbers.
Greedy policies are evaluated every ``eval_every`` episodes and the runs are
summarised by nearest-rank percentiles.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
import tempfile
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import plotting
from .envs.cartpole import CartpoleEnvironment, CartpoleSpec, cartpole_model_set
from .envs.frozen_lake import FrozenLakeSpec, frozen_lake_environment, frozen_lake_model_set, MAPS
from .exploration import ExplorationParams
from .interval import bound_iteration
from .learner import LearnerConfig, train
from .regularized import LambdaSchedule

log = logging.getLogger(__name__)

VARIANT_KINDS = ("epsilon_greedy_baseline", "bounds_L_infinity", "bounds_regularized")
PERCENTILES = (5, 50, 95)
CSV_HEADER = ("episode", "variant", "p05", "p50", "p95")


class ConfigError(ValueError):
    pass


# per-environment defaults; anything in the user config overrides these
DEFAULTS = {
    "frozen_lake": {
        "environment": {"name": "frozen_lake", "map": "4x4", "slippery": True, "max_steps": 100},
        "variants": [
            {"label": "epsilon-greedy", "kind": "epsilon_greedy_baseline"},
            {"label": "L=inf", "kind": "bounds_L_infinity"},
            {"label": "L=50", "kind": "bounds_regularized", "L": 50},
        ],
        "learner": {"alpha": 0.05, "gamma": 0.95, "epsilon_start": 1.0, "epsilon_end": 0.01},
        "exploration": {"xi": 1.0, "zeta": 0.0, "beta": "ei"},
        "schedule": {"c": 5.0, "delta": 0.05},
        "n_runs": 20,
        "n_episodes": 2000,
        "eval_every": 25,
        "eval_rollouts": 100,
    },
    "cartpole": {
        "environment": {"name": "cartpole"},
        "variants": [
            {"label": "epsilon-greedy", "kind": "epsilon_greedy_baseline"},
            {"label": "L=inf", "kind": "bounds_L_infinity"},
            {"label": "L=500", "kind": "bounds_regularized", "L": 500},
        ],
        "learner": {"alpha": 0.03, "gamma": 0.97, "epsilon_start": 1.0, "epsilon_end": 0.001},
        "exploration": {"xi": 1.0, "zeta": 0.0, "beta": "ei"},
        "schedule": {"c": 100.0, "delta": 0.05},
        "n_runs": 20,
        "n_episodes": 10000,
        "eval_every": 100,
        "eval_rollouts": 100,
    },
}


@dataclass(frozen=True)
class Variant:
    label: str
    kind: str
    L: float = math.inf

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ConfigError(f"unknown variant kind {self.kind!r}; expected one of {VARIANT_KINDS}")
        if self.kind == "bounds_regularized" and not (math.isfinite(self.L) and self.L >= 1):
            raise ConfigError(f"variant {self.label!r}: bounds_regularized needs a finite L >= 1")
        if "," in self.label or "'" in self.label:
            raise ConfigError(f"variant label {self.label!r} may not contain commas or quotes")

    @property
    def uses_bounds(self) -> bool:
        return self.kind != "epsilon_greedy_baseline"

    @property
    def period(self) -> float:
        return self.L if self.kind == "bounds_regularized" else math.inf

    def to_json(self) -> dict:
        doc = {"label": self.label, "kind": self.kind}
        if self.kind == "bounds_regularized":
            doc["L"] = int(self.L)
        return doc


@dataclass
class ExperimentConfig:
    environment: dict
    variants: list[Variant]
    learner: dict
    exploration: dict
    schedule: dict
    n_runs: int
    n_episodes: int
    eval_every: int
    eval_rollouts: int
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.n_runs < 1:
            raise ConfigError("n_runs must be >= 1")
        if self.n_episodes < 0:
            raise ConfigError("n_episodes must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.eval_rollouts < 1:
            raise ConfigError("eval_rollouts must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not self.variants:
            raise ConfigError("need at least one variant")
        labels = [v.label for v in self.variants]
        if len(set(labels)) != len(labels):
            raise ConfigError("variant labels must be unique")
        # surface invalid parameters now rather than inside a worker
        try:
            self.learner_config()
            self.exploration_params()
            self.lambda_schedule(2)
            _env_key(self.environment)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        env = doc.get("environment", {})
        name = env.get("name", "frozen_lake") if isinstance(env, dict) else env
        if name not in DEFAULTS:
            raise ConfigError(f"unknown environment {name!r}; expected one of {sorted(DEFAULTS)}")
        base = copy.deepcopy(DEFAULTS[name])
        known = set(base) | {"seed", "threads"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        merged = dict(base, seed=0, threads=1)
        for key, value in doc.items():
            if key in ("environment", "learner", "exploration", "schedule"):
                if not isinstance(value, dict):
                    raise ConfigError(f"{key!r} must be an object")
                merged[key] = {**base[key], **value}
            else:
                merged[key] = value
        merged["environment"]["name"] = name
        try:
            merged["variants"] = [Variant(**v) for v in merged["variants"]]
        except TypeError as exc:
            raise ConfigError(f"bad variant entry: {exc}") from exc
        for key in ("n_runs", "n_episodes", "eval_every", "eval_rollouts", "seed", "threads"):
            if not isinstance(merged[key], int) or isinstance(merged[key], bool):
                raise ConfigError(f"{key!r} must be an integer")
        return cls(**merged)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def learner_config(self, L: float = math.inf) -> LearnerConfig:
        opts = dict(self.learner)
        opts.setdefault("max_steps_per_episode", self.environment.get("max_steps", _default_max_steps(self.environment)))
        return LearnerConfig(**opts, L=L)

    def exploration_params(self) -> ExplorationParams:
        return ExplorationParams(**self.exploration)

    def lambda_schedule(self, n_pairs: int) -> LambdaSchedule:
        return LambdaSchedule(n_pairs=self.schedule.get("n_pairs", n_pairs),
                              **{k: v for k, v in self.schedule.items() if k != "n_pairs"})

    def resolved(self) -> dict:
        """Every setting, defaults included, as plain JSON."""
        learner = asdict(self.learner_config())
        learner.pop("L")
        env = dict(self.environment)
        if env["name"] == "cartpole":
            spec = asdict(_cartpole_spec(env))
            env = {"name": "cartpole", **{k: list(v) if isinstance(v, tuple) else v for k, v in spec.items()}}
        else:
            env.setdefault("max_steps", 100)
        return {
            "environment": env,
            "variants": [v.to_json() for v in self.variants],
            "learner": learner,
            "exploration": asdict(self.exploration_params()),
            "schedule": dict(self.schedule),
            "n_runs": self.n_runs,
            "n_episodes": self.n_episodes,
            "eval_every": self.eval_every,
            "eval_rollouts": self.eval_rollouts,
            "seed": self.seed,
            "threads": self.threads,
        }


def _default_max_steps(env: dict) -> int:
    return CartpoleSpec().max_steps if env.get("name") == "cartpole" else 100


def _cartpole_spec(env: dict) -> CartpoleSpec:
    names = {f.name for f in fields(CartpoleSpec)}
    opts = {k: (tuple(v) if isinstance(v, list) else v) for k, v in env.items() if k in names}
    unknown = set(env) - names - {"name"}
    if unknown:
        raise ValueError(f"unknown cartpole settings {sorted(unknown)}")
    return CartpoleSpec(**opts)


def _frozen_lake_spec(env: dict) -> FrozenLakeSpec:
    unknown = set(env) - {"name", "map", "grid", "slippery", "max_steps"}
    if unknown:
        raise ValueError(f"unknown frozen_lake settings {sorted(unknown)}")
    if "grid" in env:
        grid = tuple(env["grid"])
    else:
        if env.get("map", "4x4") not in MAPS:
            raise ValueError(f"unknown map {env.get('map')!r}; expected one of {sorted(MAPS)}")
        grid = MAPS[env.get("map", "4x4")]
    return FrozenLakeSpec(grid, bool(env.get("slippery", True)))


def _env_key(env: dict) -> str:
    if env.get("name") == "cartpole":
        _cartpole_spec(env)
    else:
        _frozen_lake_spec(env)
    return json.dumps(env, sort_keys=True)


@lru_cache(maxsize=4)
def _setup(env_key: str, gamma: float, bound_tol: float):
    """Environment, model set and initial (unregularised) bounds, shared by all runs in a process."""
    env_doc = json.loads(env_key)
    if env_doc["name"] == "cartpole":
        spec = _cartpole_spec(env_doc)
        env = CartpoleEnvironment(spec)
        model = cartpole_model_set(spec, discount=gamma)
    else:
        spec = _frozen_lake_spec(env_doc)
        env = frozen_lake_environment(spec, gamma, max_steps=env_doc.get("max_steps", 100))
        model = frozen_lake_model_set(spec, gamma)
    bounds = bound_iteration(model, tol=bound_tol)
    return env, model, bounds


def setup(config: ExperimentConfig):
    lc = config.learner_config()
    return _setup(_env_key(config.environment), lc.gamma, lc.bound_tol)


@dataclass
class RunRecord:
    run: int
    variant: str
    episodes: list[int] = field(default_factory=list)
    returns: list[float] = field(default_factory=list)
    successes: list[float] = field(default_factory=list)
    error: str | None = None
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.error is None


def run_seeds(master: int, run: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    """Training and evaluation seed streams for run ``run``."""
    train_seq, eval_seq = np.random.SeedSequence(master, spawn_key=(run,)).spawn(2)
    return train_seq, eval_seq


def evaluation_points(n_episodes: int, eval_every: int) -> list[int]:
    points = list(range(0, n_episodes + 1, eval_every))
    if points[-1] != n_episodes:
        points.append(n_episodes)
    return points


def run_single(config: ExperimentConfig, variant: Variant, run: int) -> RunRecord:
    record = RunRecord(run, variant.label)
    start = time.perf_counter()
    try:
        env, model, bounds = setup(config)
        train_seq, eval_seq = run_seeds(config.seed, run)
        eval_rng = np.random.default_rng(eval_seq)
        points = set(evaluation_points(config.n_episodes, config.eval_every))

        def evaluate(episode, state):
            if episode not in points:
                return
            policy = np.argmax(state.q, axis=1)
            returns, successes = env.evaluate(policy, config.eval_rollouts, eval_rng)
            record.episodes.append(episode)
            record.returns.append(float(np.mean(returns)))
            record.successes.append(float(np.mean(successes)))

        train(env, model if variant.uses_bounds else None, config.learner_config(variant.period),
              config.exploration_params(), config.lambda_schedule(model.n_states * model.n_actions),
              config.n_episodes, np.random.default_rng(train_seq), evaluate, initial_bounds=bounds)
    except Exception:  # a failed run is reported, the others carry on
        record.error = traceback.format_exc()
        log.error("run %d of %s failed:\n%s", run, variant.label, record.error)
    record.seconds = time.perf_counter() - start
    return record


def _task(args):
    doc, variant_index, run = args
    config = ExperimentConfig.from_dict(doc)
    return run_single(config, config.variants[variant_index], run)


def run_experiment(config: ExperimentConfig, progress=None) -> list[RunRecord]:
    tasks = [(vi, r) for vi in range(len(config.variants)) for r in range(config.n_runs)]
    if config.threads == 1:
        records = []
        for vi, r in tasks:
            records.append(run_single(config, config.variants[vi], r))
            if progress:
                progress(records[-1])
        return records
    doc = config.resolved()
    with ProcessPoolExecutor(max_workers=config.threads) as pool:
        records = []
        for rec in pool.map(_task, [(doc, vi, r) for vi, r in tasks]):
            records.append(rec)
            if progress:
                progress(rec)
    return records


def nearest_rank(values, pct: float) -> float:
    ordered = sorted(values)
    if not ordered:
        raise ValueError("no values")
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


def aggregate(records: list[RunRecord], metric: str = "returns") -> list[tuple]:
    """Rows ``(episode, variant, p05, p50, p95)`` over successful runs, in variant order of first appearance."""
    good = [r for r in records if r.ok]
    if not good:
        raise ValueError("no successful runs to aggregate")
    grouped: dict[str, dict[int, list[float]]] = {}
    for rec in good:
        table = grouped.setdefault(rec.variant, {})
        for episode, value in zip(rec.episodes, getattr(rec, metric)):
            table.setdefault(episode, []).append(value)
    rows = []
    for variant, table in grouped.items():
        for episode in sorted(table):
            vals = table[episode]
            rows.append((episode, variant, *(nearest_rank(vals, p) for p in PERCENTILES)))
    return rows


def _atomic_write(path: Path, text: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(text, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def table_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for episode, variant, *pcts in rows:
        writer.writerow([episode, variant, *(f"{v:.6f}" for v in pcts)])
    return buf.getvalue()


def runs_csv(records: list[RunRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("run", "variant", "episode", "return", "success"))
    for rec in records:
        for episode, ret, succ in zip(rec.episodes, rec.returns, rec.successes):
            writer.writerow([rec.run, rec.variant, episode, f"{ret:.6f}", f"{succ:.6f}"])
    return buf.getvalue()


def emit_outputs(table, config: ExperimentConfig, out_dir, records: list[RunRecord] | None = None,
                 png: bool = True) -> list[Path]:
    """Write results.csv, config.resolved.json and plot.gp (plus extras when ``records`` is given)."""
    out = Path(out_dir)
    written = []

    def put(name, content):
        path = out / name
        try:
            _atomic_write(path, content)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written.append(path)

    ylabel = "success rate" if config.environment["name"] == "frozen_lake" else "balanced steps"
    variants = [v.label for v in config.variants]
    put("results.csv", table_csv(table))
    put("config.resolved.json", json.dumps(config.resolved(), indent=2, sort_keys=True) + "\n")
    put("plot.gp", plotting.gnuplot_script("results.csv", variants, ylabel="evaluation return"))
    if records is not None:
        put("success.csv", table_csv(aggregate(records, "successes")))
        put("runs.csv", runs_csv(records))
        if png:
            put("plot.png", plotting.render_png(table, ylabel="evaluation return"))
            put("success.png", plotting.render_png(aggregate(records, "successes"), ylabel=ylabel))
    return written
