"""Population-based, surrogate-guided multi-objective architecture search."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..data import Dataset
from ..metrics import DEFAULT_BETA, REPORT_COLUMNS, evaluate_model, write_report_csv
from ..model import ArchitectureEncoding, MoEModel, ModelConfig, count_params, model_id, save_checkpoint
from ..training import TrainConfig, TrainingDivergedError, train
from .pareto import non_dominated_ranks, pareto_indices
from .space import check_feasible, default_bounds, in_bounds, mutate, sample_encoding
from .surrogate import GradientBoostedTrees, fit_surrogates

log = logging.getLogger(__name__)

OBJECTIVES = ("test_accuracy", "fairness", "robustness", "neg_overfitting")
STATE_VERSION = 1


class SearchSpaceExhausted(Exception):
    """No unseen in-bounds candidate could be generated."""


class ConstraintViolation(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    beta: float = DEFAULT_BETA
    spd_mode: str = "sum"
    light_threshold: float = 0.5


@dataclass
class EvaluationRecord:
    encoding: ArchitectureEncoding
    objectives: dict[str, float]
    param_count: int
    train_seed: int
    wall_time: float = 0.0
    failed: bool = False
    error: str = ""
    val_accuracy: float = float("nan")
    spd: float = float("nan")
    model_id: str = ""

    def vector(self) -> np.ndarray:
        return np.array([self.objectives[k] for k in OBJECTIVES])

    def report_row(self, cfg: EvalConfig) -> dict:
        """Row in the metrics report schema; overfitting is converted back to its natural sign."""
        o = self.objectives
        return {
            "model_id": self.model_id,
            "encoding": str(self.encoding),
            "val_acc": repr(float(self.val_accuracy)),
            "test_acc": repr(float(o["test_accuracy"])),
            "fairness": repr(float(o["fairness"])),
            "spd": repr(float(self.spd)),
            "spd_mode": cfg.spd_mode,
            "beta": repr(float(cfg.beta)),
            "robustness": repr(float(o["robustness"])),
            "overfitting": repr(float(-o["neg_overfitting"])),
            "param_count": str(self.param_count),
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoding"] = list(self.encoding)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationRecord":
        d = dict(d)
        d["encoding"] = ArchitectureEncoding(d["encoding"])
        return cls(**d)

    def same_result(self, other: "EvaluationRecord") -> bool:
        """Equality ignoring wall time."""
        a, b = self.to_dict(), other.to_dict()
        a.pop("wall_time"), b.pop("wall_time")
        return json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def evaluate(encoding: ArchitectureEncoding, dataset: Dataset, cfg: EvalConfig = EvalConfig(),
             model_seed: int = 0) -> tuple[EvaluationRecord, bytes | None]:
    """Train a fresh model for ``encoding`` and measure all objectives.

    Divergence yields a failed record rather than an exception.
    """
    encoding.validate(cfg.model)
    t0 = time.perf_counter()
    model = MoEModel(cfg.model, encoding, seed=model_seed)
    n_params = count_params(encoding, cfg.model)
    try:
        train(model, dataset.train, cfg.train)
    except TrainingDivergedError as exc:
        log.warning("evaluation of %s diverged: %s", encoding, exc)
        nan = {k: float("nan") for k in OBJECTIVES}
        return EvaluationRecord(encoding, nan, n_params, cfg.train.seed, time.perf_counter() - t0,
                                failed=True, error=str(exc)), None
    rep = evaluate_model(model, dataset, cfg.beta, cfg.spd_mode, cfg.light_threshold)
    blob = save_checkpoint(model)
    objectives = {"test_accuracy": rep.test_accuracy, "fairness": rep.fairness_score,
                  "robustness": rep.robustness, "neg_overfitting": -rep.overfitting}
    rec = EvaluationRecord(encoding, {k: float(v) for k, v in objectives.items()}, n_params,
                           cfg.train.seed, time.perf_counter() - t0, val_accuracy=float(rep.val_accuracy),
                           spd=float(rep.spd), model_id=model_id(blob))
    return rec, blob


@dataclass(frozen=True)
class SearchConfig:
    seed: int = 0
    initial_population: int = 16
    iterations: int = 10
    n_candidates: int = 64
    n_select: int = 4
    min_params: int | None = None
    max_params: int | None = None
    workers: int = 4
    include_baseline: bool = True
    explore: bool = False
    explore_weight: float = 1.0
    n_trees: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    model_seed: int = 0
    eval: EvalConfig = EvalConfig()

    def __post_init__(self):
        for name in ("initial_population", "n_select", "n_candidates", "workers", "n_trees", "max_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be non-negative, got {self.iterations}")
        if self.n_candidates < self.n_select:
            raise ValueError(f"n_candidates ({self.n_candidates}) is smaller than n_select ({self.n_select})")

    def bounds(self) -> tuple[int, int]:
        lo, hi = default_bounds(self.eval.model)
        return (lo if self.min_params is None else self.min_params,
                hi if self.max_params is None else self.max_params)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        d = dict(d)
        e = dict(d.pop("eval"))
        ev = EvalConfig(model=ModelConfig(**e.pop("model")), train=TrainConfig(**e.pop("train")), **e)
        return cls(eval=ev, **d)


@dataclass
class SearchState:
    config: SearchConfig
    archive: list[EvaluationRecord] = field(default_factory=list)
    population: list[ArchitectureEncoding] = field(default_factory=list)
    iteration: int = 0
    rng_state: dict | None = None
    terminated: str = ""

    @property
    def bounds(self) -> tuple[int, int]:
        return self.config.bounds()

    def successful(self) -> list[EvaluationRecord]:
        return [r for r in self.archive if not r.failed]

    def seen(self) -> set[tuple[int, ...]]:
        return {r.encoding.expert_counts for r in self.archive}

    def front(self) -> list[EvaluationRecord]:
        return pareto_front(self.successful())

    def to_dict(self) -> dict:
        return {
            "version": STATE_VERSION,
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "bounds": list(self.bounds),
            "iteration": self.iteration,
            "terminated": self.terminated,
            "rng_state": self.rng_state,
            "population": [list(e) for e in self.population],
            "archive": [r.to_dict() for r in self.archive],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchState":
        if d.get("version") != STATE_VERSION:
            raise ValueError(f"unsupported search state version {d.get('version')!r}")
        return cls(SearchConfig.from_dict(d["config"]),
                   [EvaluationRecord.from_dict(r) for r in d["archive"]],
                   [ArchitectureEncoding(e) for e in d["population"]],
                   d["iteration"], d["rng_state"], d.get("terminated", ""))

    def save(self, path) -> None:
        tmp = Path(str(path) + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1, allow_nan=True))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "SearchState":
        return cls.from_dict(json.loads(Path(path).read_text()))


def pareto_front(records: list[EvaluationRecord]) -> list[EvaluationRecord]:
    if not records:
        return []
    F = np.array([r.vector() for r in records])
    return [records[i] for i in pareto_indices(F)]


def scalarized(record: EvaluationRecord, weights=None) -> float:
    w = np.full(len(OBJECTIVES), 1.0 / len(OBJECTIVES)) if weights is None else np.asarray(weights)
    return float(record.vector() @ w)


def encoding_matrix(records_or_encodings) -> np.ndarray:
    rows = [r.encoding if isinstance(r, EvaluationRecord) else r for r in records_or_encodings]
    return np.array([list(e) for e in rows], dtype=np.float64)


def fit_archive_surrogates(records: list[EvaluationRecord], cfg: SearchConfig) -> dict[str, GradientBoostedTrees]:
    ok = [r for r in records if not r.failed]
    X = encoding_matrix(ok)
    targets = {k: np.array([r.objectives[k] for r in ok]) for k in OBJECTIVES}
    return fit_surrogates(X, targets, cfg.n_trees, cfg.max_depth, cfg.learning_rate)


def predict_objectives(surrogates: dict[str, GradientBoostedTrees], X: np.ndarray, explore: bool = False,
                       explore_weight: float = 1.0) -> np.ndarray:
    cols = []
    for k in OBJECTIVES:
        p = surrogates[k].predict(X)
        if explore:
            p = p + explore_weight * surrogates[k].disagreement(X)
        cols.append(p)
    return np.stack(cols, axis=1)


def select_candidates(P: np.ndarray, n_select: int, rng: np.random.Generator) -> list[int]:
    """Fill by predicted front; the front that overflows is cut by a random-weight scalarization."""
    ranks = non_dominated_ranks(P)
    chosen: list[int] = []
    for r in range(1, int(ranks.max(initial=0)) + 1):
        idx = np.flatnonzero(ranks == r)
        room = n_select - len(chosen)
        if room <= 0:
            break
        if len(idx) <= room:
            chosen.extend(int(i) for i in idx)
            continue
        w = rng.dirichlet(np.ones(P.shape[1]))
        scores = P[idx] @ w
        order = np.argsort(-scores, kind="stable")
        chosen.extend(int(i) for i in idx[order[:room]])
    return chosen


def propose(state: SearchState, surrogates: dict[str, GradientBoostedTrees], n_candidates: int, n_select: int,
            rng: np.random.Generator, explore: bool = False, explore_weight: float = 1.0) -> list[ArchitectureEncoding]:
    """Mutate rank-weighted archive parents, then pick by predicted dominance."""
    parents = state.successful()
    if not parents:
        raise SearchSpaceExhausted("no successful evaluations to mutate")
    model_cfg = state.config.eval.model
    ranks = non_dominated_ranks(np.array([r.vector() for r in parents]))
    p = 1.0 / ranks
    p = p / p.sum()
    seen = state.seen()
    pool: list[ArchitectureEncoding] = []
    pool_keys: set[tuple[int, ...]] = set()
    for _ in range(n_candidates * 20):
        if len(pool) >= n_candidates:
            break
        parent = parents[int(rng.choice(len(parents), p=p))].encoding
        try:
            child = mutate(parent, rng, model_cfg, state.bounds, max_retries=50)
        except ValueError:
            continue
        key = child.expert_counts
        if key in seen or key in pool_keys:
            continue
        pool.append(child)
        pool_keys.add(key)
    if not pool:
        raise SearchSpaceExhausted("every reachable in-bounds encoding is already archived")
    P = predict_objectives(surrogates, encoding_matrix(pool), explore, explore_weight)
    return [pool[i] for i in select_candidates(P, n_select, rng)]


# worker-side dataset, installed once per process
_WORKER_DATASET: Dataset | None = None


def _init_worker(dataset: Dataset) -> None:
    global _WORKER_DATASET
    _WORKER_DATASET = dataset


def _worker_evaluate(args):
    encoding, cfg, model_seed = args
    return evaluate(encoding, _WORKER_DATASET, cfg, model_seed)


def _evaluate_batch(encodings, dataset: Dataset, cfg: SearchConfig, pool) -> list[tuple[EvaluationRecord, bytes | None]]:
    jobs = [(e, cfg.eval, cfg.model_seed) for e in encodings]
    if pool is None:
        return [evaluate(e, dataset, c, s) for e, c, s in jobs]
    # map preserves submission order, so commit order is proposal order
    return list(pool.map(_worker_evaluate, jobs))


def _commit(state: SearchState, results, out_dir: Path | None) -> None:
    bounds = state.bounds
    for rec, blob in results:
        if not in_bounds(rec.encoding, state.config.eval.model, bounds):
            raise ConstraintViolation(f"{rec.encoding} has {rec.param_count} params outside {bounds}")
        if rec.encoding.expert_counts in state.seen():
            raise ValueError(f"{rec.encoding} evaluated twice")
        state.archive.append(rec)
        if out_dir is not None and blob is not None:
            ckdir = out_dir / "checkpoints"
            ckdir.mkdir(parents=True, exist_ok=True)
            (ckdir / f"{'-'.join(map(str, rec.encoding))}.moen").write_bytes(blob)


def initial_population(cfg: SearchConfig, rng: np.random.Generator) -> list[ArchitectureEncoding]:
    model_cfg = cfg.eval.model
    bounds = cfg.bounds()
    check_feasible(model_cfg, bounds)
    pop: list[ArchitectureEncoding] = []
    keys: set[tuple[int, ...]] = set()
    if cfg.include_baseline:
        base = ArchitectureEncoding.uniform(model_cfg.n_layers, 1)
        if in_bounds(base, model_cfg, bounds):
            pop.append(base)
            keys.add(base.expert_counts)
    space = model_cfg.max_experts ** model_cfg.n_layers
    for _ in range(cfg.initial_population * 100):
        if len(pop) >= min(cfg.initial_population, space):
            break
        enc = sample_encoding(rng, bounds, model_cfg)
        if enc.expert_counts not in keys:
            pop.append(enc)
            keys.add(enc.expert_counts)
    return pop


def _rng_from(state: SearchState) -> np.random.Generator:
    rng = np.random.default_rng(state.config.seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    return rng


def run_search(cfg: SearchConfig, dataset: Dataset, out_dir=None, state: SearchState | None = None,
               stop_after: int | None = None) -> SearchState:
    """Run (or resume) the search.

    The state file is rewritten after the initial population and after every
    iteration; passing a loaded state resumes exactly where it stopped.
    ``stop_after`` halts once that many iterations are complete, which is how
    interruption is simulated in tests.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    check_feasible(cfg.eval.model, cfg.bounds())
    pool = None
    if cfg.workers > 1:
        pool = ProcessPoolExecutor(max_workers=cfg.workers, initializer=_init_worker, initargs=(dataset,))
    try:
        if state is None:
            state = SearchState(cfg)
            rng = _rng_from(state)
            state.population = initial_population(cfg, rng)
            log.info("evaluating initial population of %d", len(state.population))
            _commit(state, _evaluate_batch(state.population, dataset, cfg, pool), out)
            state.rng_state = rng.bit_generator.state
            _persist(state, out)
        else:
            rng = _rng_from(state)
        while state.iteration < cfg.iterations and not state.terminated:
            if stop_after is not None and state.iteration >= stop_after:
                break
            try:
                surrogates = fit_archive_surrogates(state.archive, cfg)
                state.population = propose(state, surrogates, cfg.n_candidates, cfg.n_select, rng,
                                           cfg.explore, cfg.explore_weight)
            except SearchSpaceExhausted as exc:
                log.info("search stopped: %s", exc)
                state.terminated = "exhausted"
                state.rng_state = rng.bit_generator.state
                _persist(state, out)
                break
            _commit(state, _evaluate_batch(state.population, dataset, cfg, pool), out)
            state.iteration += 1
            state.rng_state = rng.bit_generator.state
            best = max((scalarized(r) for r in state.successful()), default=math.nan)
            log.info("iteration %d: archive %d, best scalarized %.4f", state.iteration, len(state.archive), best)
            _persist(state, out)
    finally:
        if pool is not None:
            pool.shutdown()
    return state


def _persist(state: SearchState, out: Path | None) -> None:
    if out is None:
        return
    state.save(out / "search_state.json")
    write_pareto_csv(state, out / "pareto.csv")


def write_pareto_csv(state: SearchState, path=None) -> str:
    return write_report_csv([r.report_row(state.config.eval) for r in state.front()], path)


def archive_rows(state: SearchState) -> list[dict]:
    cols = list(REPORT_COLUMNS) + ["failed"]
    rows = []
    for r in state.archive:
        row = r.report_row(state.config.eval)
        row["failed"] = int(r.failed)
        rows.append({c: row[c] for c in cols})
    return rows
