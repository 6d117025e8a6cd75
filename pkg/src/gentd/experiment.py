"""Experiment configuration, multi-seed training loops and CSV emission."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .approx import DEFAULT_RADIUS, FeatureMap, complete_basis, nonconstant_basis
from .cases import (
    GvfCase,
    anomaly_case,
    backward_value_case,
    canonical_case,
    grad_logmu_case,
    grad_q_case,
    variance_case,
)
from .density_ratio import init_ratio_state, ratio_system_singular_values, ratio_table, true_ratio
from .envs import build_baird, build_example1
from .gvf import AssembledOperator, assemble, solve_ground_truth
from .learners import (
    GenTdState,
    GtdState,
    StepSchedule,
    estimation_error,
    gentd_step,
    gtd_step,
    mspgbe,
)
from .mdp import (
    TransitionBatch,
    sample_transitions,
    state_action_kernel,
    stationary_distribution,
)

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentRun",
    "TaskSetup",
    "CSV_COLUMNS",
    "ENVIRONMENTS",
    "TASKS",
    "build_task",
    "run_experiment",
    "write_csvs",
    "read_curve_csv",
    "load_config_file",
]

CSV_COLUMNS = ("iteration", "seed", "estimation_error", "mspgbe", "ratio_error")
ENVIRONMENTS = ("baird", "example1")
TASKS = ("grad_q", "grad_logmu", "variance", "anomaly", "canonical", "backward_value")
LEARNERS = ("gentd", "gtd")
_KIND_ALIASES = {"cft": "complete", "complete": "complete", "incft": "incomplete", "incomplete": "incomplete"}

# (theta, secondary) step bases per (learner, task); secondary is the ratio
# step for GenTD and the auxiliary-vector step for GTD
_DEFAULT_RATES = {
    ("gentd", "grad_logmu"): (0.005, 0.05),
    ("gtd", None): (0.005, 0.005),
    ("gentd", None): (0.005, 0.01),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    env: str = "baird"
    task: str = "grad_q"
    features: str = "complete"
    learner: str = "gentd"
    iterations: int = 200_000
    seeds: Tuple[int, ...] = tuple(range(20))
    lr_theta: Optional[float] = None
    lr_ratio: Optional[float] = None
    theta_offset: Optional[float] = None
    ratio_offset: Optional[float] = None
    eval_every: int = 1000
    discount: Optional[float] = None
    ratio_features: str = "complete"
    oracle_ratio: bool = False
    clip_ratio: bool = False
    ratio_l2: float = 0.0
    radius: float = DEFAULT_RADIUS
    ratio_radius: float = DEFAULT_RADIUS
    drop_column: Optional[int] = None
    chunk: int = 4096
    workers: int = 1
    out: Optional[str] = None
    name: Optional[str] = None

    def __post_init__(self):
        if self.env not in ENVIRONMENTS:
            raise ConfigError(f"unknown environment {self.env!r}; choose from {ENVIRONMENTS}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.learner not in LEARNERS:
            raise ConfigError(f"unknown learner {self.learner!r}; choose from {LEARNERS}")
        if self.features not in _KIND_ALIASES:
            raise ConfigError(f"unknown feature kind {self.features!r}")
        if self.ratio_features not in ("complete", "match"):
            raise ConfigError("ratio_features must be 'complete' or 'match'")
        object.__setattr__(self, "features", _KIND_ALIASES[self.features])
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            raise ConfigError("at least one seed is required")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds must be distinct")
        object.__setattr__(self, "seeds", seeds)
        if self.eval_every <= 0 or self.chunk <= 0:
            raise ConfigError("eval_every and chunk must be positive")

    @property
    def label(self) -> str:
        return self.name or f"{self.env}_{self.task}_{self.features}_{self.learner}"

    def rates(self) -> Tuple[float, float]:
        key = (self.learner, self.task) if (self.learner, self.task) in _DEFAULT_RATES else (self.learner, None)
        a0, b0 = _DEFAULT_RATES[key]
        return (a0 if self.lr_theta is None else self.lr_theta, b0 if self.lr_ratio is None else self.lr_ratio)


@dataclass
class TaskSetup:
    mdp: object
    policy: object
    behavior: object
    kernel: object
    mu: object
    case: GvfCase
    features: FeatureMap
    ratio_features: np.ndarray
    ground_truth: np.ndarray
    op: AssembledOperator
    rho: np.ndarray


def _build_case(task: str, mdp, pi, kernel, mu) -> GvfCase:
    if task == "grad_q":
        return grad_q_case(mdp, pi)
    if task == "grad_logmu":
        return grad_logmu_case(mdp, pi)
    if task == "variance":
        return variance_case(mdp, pi)
    if task == "canonical":
        return canonical_case(mdp, pi)
    if task == "anomaly":
        return anomaly_case(mdp.reward_vector(), kernel, mu, mdp.discount, mdp.num_actions)
    return backward_value_case(mdp, pi, mu)


def build_task(config: ExperimentConfig) -> TaskSetup:
    if config.env == "baird":
        mdp, pi, d = build_baird()
    else:
        mdp, pi, d = build_example1()
    if config.discount is not None:
        mdp = mdp.with_discount(config.discount)
    if config.task in ("grad_q", "grad_logmu") and not pi.is_softmax:
        raise ConfigError(f"task {config.task} needs a softmax policy; environment {config.env} has none")
    kernel = state_action_kernel(mdp, pi)
    mu = stationary_distribution(kernel)
    case = _build_case(config.task, mdp, pi, kernel, mu)
    n = mdp.num_pairs
    if config.task == "grad_logmu":
        base = nonconstant_basis(n, config.features, config.drop_column)
    else:
        base = complete_basis(n, config.features, config.drop_column)
    features = FeatureMap.shared(base, case.spec.dims)
    kind = config.features if config.ratio_features == "match" else "complete"
    psi = complete_basis(n, kind, config.drop_column)
    op = assemble(case.spec, kernel, mu)
    truth = solve_ground_truth(op)
    return TaskSetup(mdp, pi, d, kernel, mu, case, features, psi, truth, op, true_ratio(mu, d))


@dataclass
class ExperimentRun:
    config: ExperimentConfig
    iterations: np.ndarray
    estimation_error: np.ndarray
    mspgbe: np.ndarray
    ratio_error: Optional[np.ndarray]
    wall_clock: float
    thetas: np.ndarray  # (seeds, checkpoints, params)
    final_ratio: Optional[np.ndarray] = None
    paths: Dict[str, Path] = field(default_factory=dict)

    @property
    def final_theta(self) -> np.ndarray:
        return self.thetas[:, -1]

    def mean_curve(self) -> Dict[str, np.ndarray]:
        out = {"iteration": self.iterations, "estimation_error": self.estimation_error.mean(axis=0),
               "mspgbe": self.mspgbe.mean(axis=0)}
        if self.ratio_error is not None:
            out["ratio_error"] = self.ratio_error.mean(axis=0)
        return out


def _seed_streams(setup: TaskSetup, seeds: Sequence[int], chunk: int):
    """Per-seed generators yielding sample chunks; independent of batching."""
    rngs = [np.random.default_rng(s) for s in seeds]
    while True:
        batches = [sample_transitions(setup.behavior, setup.mdp, setup.policy, r, chunk) for r in rngs]
        yield np.stack([np.stack(tuple(b)) for b in batches], axis=0)  # (n, 4, chunk)


def _run_group(config: ExperimentConfig, seeds: Tuple[int, ...]):
    setup = build_task(config)
    n = len(seeds)
    a0, b0 = config.rates()
    alpha = StepSchedule(a0, config.theta_offset)
    beta = StepSchedule(b0, config.ratio_offset)
    A = setup.mdp.num_actions
    if config.learner == "gentd":
        ratio = init_ratio_state(setup.ratio_features, n, config.ratio_radius, config.clip_ratio, config.ratio_l2)
        fixed = setup.rho if config.oracle_ratio else None
        state = GenTdState.create(setup.features, ratio, alpha, beta, config.radius, fixed_ratio=fixed)
        step = gentd_step
    else:
        state = GtdState.create(setup.features, n, alpha, beta, config.radius)
        step = gtd_step

    checkpoints = [0] + list(range(config.eval_every, config.iterations + 1, config.eval_every))
    if checkpoints[-1] != config.iterations:
        checkpoints.append(config.iterations)
    est = np.zeros((n, len(checkpoints)))
    obj = np.zeros_like(est)
    rerr = np.zeros_like(est) if config.learner == "gentd" else None
    thetas = np.zeros((n, len(checkpoints), setup.features.num_params))

    def record(c):
        thetas[:, c] = state.theta
        est[:, c] = estimation_error(state.theta, setup.features, setup.ground_truth, setup.mu)
        obj[:, c] = mspgbe(state.theta, setup.op, setup.features, setup.mu)
        if rerr is not None:
            rerr[:, c] = np.abs(ratio_table(state.ratio) - setup.rho).max(axis=1)

    record(0)
    stream = _seed_streams(setup, seeds, config.chunk)
    buf, pos = None, config.chunk
    nxt = 1
    for t in range(1, config.iterations + 1):
        if pos == config.chunk:
            buf, pos = next(stream), 0
        col = buf[:, :, pos]
        pos += 1
        sample = TransitionBatch(col[:, 0], col[:, 1], col[:, 2], col[:, 3], A)
        state = step(state, setup.case, setup.features, sample)
        if t == checkpoints[nxt]:
            record(nxt)
            nxt += 1
    final_ratio = ratio_table(state.ratio) if config.learner == "gentd" else None
    return np.array(checkpoints), est, obj, rerr, thetas, final_ratio


def run_experiment(config: ExperimentConfig, write: bool = True) -> ExperimentRun:
    """Train one learner on every seed and optionally persist the curves.

    Seeds are batched into ``workers`` groups; each seed owns its generator
    and consumes samples in fixed-size chunks, so results do not depend on
    how the seeds are grouped.
    """
    start = time.perf_counter()
    setup = build_task(config)
    if config.learner == "gentd" and not config.oracle_ratio:
        ratio_system_singular_values(setup.ratio_features, setup.behavior, setup.kernel)
    seeds = config.seeds
    workers = max(1, min(config.workers, len(seeds)))
    groups = [tuple(g) for g in np.array_split(np.array(seeds), workers) if len(g)]
    if workers == 1:
        results = [_run_group(config, groups[0])]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_group, [config] * len(groups), groups))
    iters = results[0][0]
    est = np.concatenate([r[1] for r in results])
    obj = np.concatenate([r[2] for r in results])
    rerr = None if results[0][3] is None else np.concatenate([r[3] for r in results])
    thetas = np.concatenate([r[4] for r in results])
    fr = None if results[0][5] is None else np.concatenate([r[5] for r in results])
    run = ExperimentRun(config, iters, est, obj, rerr, time.perf_counter() - start, thetas, fr)
    if write and config.out:
        run.paths = write_csvs(run, config.out)
    return run


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def write_csvs(run: ExperimentRun, out_dir) -> Dict[str, Path]:
    """Per-seed curves and their exact arithmetic mean (seed column 'mean')."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    label = run.config.label
    per_seed = out / f"{label}_seeds.csv"
    mean = out / f"{label}_mean.csv"
    with per_seed.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for i, seed in enumerate(run.config.seeds):
            for c, it in enumerate(run.iterations):
                re = None if run.ratio_error is None else run.ratio_error[i, c]
                w.writerow([int(it), seed, _fmt(run.estimation_error[i, c]), _fmt(run.mspgbe[i, c]), _fmt(re)])
    curve = run.mean_curve()
    with mean.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for c, it in enumerate(run.iterations):
            re = curve["ratio_error"][c] if "ratio_error" in curve else None
            w.writerow([int(it), "mean", _fmt(curve["estimation_error"][c]), _fmt(curve["mspgbe"][c]), _fmt(re)])
    return {"seeds": per_seed, "mean": mean}


def read_curve_csv(path) -> Dict[str, np.ndarray]:
    """Load a curve CSV; returns column arrays (ratio_error NaN when blank)."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or tuple(rows[0].keys()) != CSV_COLUMNS:
        raise ConfigError(f"{path} does not have the expected columns {CSV_COLUMNS}")
    conv = lambda v: float(v) if v != "" else np.nan
    return {
        "iteration": np.array([int(r["iteration"]) for r in rows]),
        "seed": np.array([r["seed"] for r in rows]),
        "estimation_error": np.array([conv(r["estimation_error"]) for r in rows]),
        "mspgbe": np.array([conv(r["mspgbe"]) for r in rows]),
        "ratio_error": np.array([conv(r["ratio_error"]) for r in rows]),
    }


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _coerce(key: str, value: str):
    if key == "seeds":
        return _parse_seeds(value)
    if key in ("iterations", "eval_every", "chunk", "workers", "drop_column"):
        return int(value)
    if key in ("oracle_ratio", "clip_ratio"):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if key in ("lr_theta", "lr_ratio", "theta_offset", "ratio_offset", "discount", "ratio_l2", "radius", "ratio_radius"):
        return float(value)
    return value.strip()


def _parse_seeds(value) -> Tuple[int, ...]:
    """'20' -> 0..19; '3,5,9' -> those seeds; '10-14' -> 10..14."""
    if isinstance(value, int):
        return tuple(range(value))
    text = str(value).strip()
    if "," in text:
        return tuple(int(x) for x in text.split(",") if x.strip())
    if "-" in text:
        lo, hi = text.split("-", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(range(int(text)))


def load_config_file(path) -> Dict[str, object]:
    """Read ``[experiment]`` key = value pairs (dashes or underscores in keys)."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read config file {path}")
    if not cp.has_section("experiment"):
        raise ConfigError(f"{path} has no [experiment] section")
    out = {}
    for key, value in cp["experiment"].items():
        k = key.replace("-", "_")
        if k == "iters":
            k = "iterations"
        if k not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[k] = _coerce(k, value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return out
