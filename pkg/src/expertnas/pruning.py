"""Usage-driven expert pruning.

Each iteration routes the validation split, removes the globally least-used
expert (never a layer's last one) and re-evaluates. Tokens that used to
reach a pruned expert fall through to their next most probable active
expert.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Split
from .metrics import DEFAULT_BETA, MetricReport, evaluate_model
from .model import MoEModel, load_checkpoint, save_checkpoint
from .model.network import check_prunable
from .numerics import ContractError
from .training import TrainConfig, train

log = logging.getLogger(__name__)

PRUNE_LOG_COLUMNS = ("iteration", "layer", "expert", "param_count", "test_acc", "fairness", "robustness")


class NothingToPrune(Exception):
    """Every layer is down to a single active expert."""


@dataclass
class ExpertUsageStats:
    counts: list[np.ndarray]  # counts[l][e], zero for inactive slots
    total_tokens: list[int]

    def top_share(self, k: int = 2) -> list[float]:
        """Fraction of each layer's tokens handled by its ``k`` busiest experts."""
        out = []
        for c, t in zip(self.counts, self.total_tokens):
            out.append(float(np.sort(c)[::-1][:k].sum() / t) if t else 0.0)
        return out


def usage_from_trace(token_idx: np.ndarray, n_experts: list[int]) -> ExpertUsageStats:
    counts, totals = [], []
    for l, n in enumerate(n_experts):
        flat = token_idx[:, l, :].reshape(-1)
        counts.append(np.bincount(flat, minlength=n).astype(np.int64))
        totals.append(int(flat.size))
    return ExpertUsageStats(counts, totals)


def collect_usage(model: MoEModel, split: Split) -> ExpertUsageStats:
    _, token_idx = model.predict(split.images)
    return usage_from_trace(token_idx, list(model.encoding))


def select_prune_target(stats: ExpertUsageStats, masks: list[np.ndarray]) -> tuple[int, int]:
    best = None
    for l, (c, m) in enumerate(zip(stats.counts, masks)):
        if m.sum() < 2:
            continue
        for e in np.flatnonzero(m):
            key = (int(c[e]), l, int(e))
            if best is None or key < best:
                best = key
    if best is None:
        raise NothingToPrune("every layer has a single active expert")
    return best[1], best[2]


def prune_expert(model: MoEModel, layer: int, expert: int) -> MoEModel:
    """Deactivate one expert in place."""
    check_prunable(model, layer, expert)
    if model.blocks[layer].switch.n_active < 2:
        raise ContractError(f"expert {expert} is the last active expert of layer {layer}")
    model.blocks[layer].switch.router.active_mask[expert] = False
    return model


@dataclass(frozen=True)
class PruneThresholds:
    max_acc_drop: float = 0.02
    max_fairness_drop: float = 0.05
    max_iterations: int = 32


@dataclass
class PruneLogEntry:
    iteration: int
    layer: int | None
    expert: int | None
    param_count: int
    metrics: MetricReport

    def row(self) -> dict:
        return {
            "iteration": self.iteration,
            "layer": "" if self.layer is None else self.layer,
            "expert": "" if self.expert is None else self.expert,
            "param_count": self.param_count,
            "test_acc": repr(float(self.metrics.test_accuracy)),
            "fairness": repr(float(self.metrics.fairness_score)),
            "robustness": repr(float(self.metrics.robustness)),
        }


@dataclass
class PruneResult:
    model: MoEModel
    log: list[PruneLogEntry] = field(default_factory=list)
    stop_reason: str = ""
    rejected: PruneLogEntry | None = None

    @property
    def reduction(self) -> float:
        first, last = self.log[0].param_count, self.log[-1].param_count
        return 1.0 - last / first


def prune_loop(model: MoEModel, dataset: Dataset, thresholds: PruneThresholds = PruneThresholds(),
               beta: float = DEFAULT_BETA, spd_mode: str = "sum", light_threshold: float = 0.5,
               finetune: TrainConfig | None = None) -> PruneResult:
    """Prune until a threshold breaks, nothing is left to prune or the budget runs out.

    The step that breaks a threshold is rolled back from the checkpoint taken
    just before it, so the returned model is the last accepted one.
    """
    base = evaluate_model(model, dataset, beta, spd_mode, light_threshold)
    result = PruneResult(model, [PruneLogEntry(0, None, None, model.parameter_count(), base)])
    for it in range(1, thresholds.max_iterations + 1):
        stats = collect_usage(result.model, dataset.val)
        try:
            layer, expert = select_prune_target(stats, result.model.masks())
        except NothingToPrune:
            result.stop_reason = "nothing_to_prune"
            return result
        before = save_checkpoint(result.model)
        prune_expert(result.model, layer, expert)
        if finetune is not None and finetune.epochs > 0:
            train(result.model, dataset.train, finetune)
        rep = evaluate_model(result.model, dataset, beta, spd_mode, light_threshold)
        entry = PruneLogEntry(it, layer, expert, result.model.parameter_count(), rep)
        acc_drop = base.test_accuracy - rep.test_accuracy
        fair_drop = base.fairness_score - rep.fairness_score
        log.info("prune %d: layer %d expert %d -> %d params, test %.4f, fairness %.4f",
                 it, layer, expert, entry.param_count, rep.test_accuracy, rep.fairness_score)
        if acc_drop > thresholds.max_acc_drop or fair_drop > thresholds.max_fairness_drop:
            result.model = load_checkpoint(before)
            result.rejected = entry
            result.stop_reason = "threshold"
            return result
        result.log.append(entry)
    result.stop_reason = "max_iterations" if thresholds.max_iterations else "no_budget"
    return result


def prune_log_csv(entries: list[PruneLogEntry], path=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=PRUNE_LOG_COLUMNS, lineterminator="\n")
    w.writeheader()
    for e in entries:
        w.writerow(e.row())
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
