"""Train one multi-expert model and sweep the pruning accuracy budget.

    python scripts/prune_ablation.py [--encoding 2,2,4,4,2,2,4,4,2] [--epochs 2]
"""

import argparse

from expertnas.data import DatasetSpec, generate
from expertnas.model import ArchitectureEncoding, MoEModel, ModelConfig, load_checkpoint, save_checkpoint
from expertnas.pruning import PruneThresholds, prune_loop
from expertnas.svg import line_chart
from expertnas.training import TrainConfig, train


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--encoding", default="2,2,4,4,2,2,4,4,2")
    ap.add_argument("--epochs", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--svg", default="prune_ablation.svg")
    args = ap.parse_args()

    ds = generate(DatasetSpec(seed=args.seed))
    model = MoEModel(ModelConfig(), ArchitectureEncoding.parse(args.encoding), seed=args.seed)
    train(model, ds.train, TrainConfig(epochs=args.epochs, seed=args.seed))
    blob = save_checkpoint(model)

    # no budget at all: prune to one expert per layer and record the whole curve
    full = prune_loop(load_checkpoint(blob), ds, PruneThresholds(1.0, 100.0, 64))
    first = full.log[0].param_count
    print("iteration,params,size_ratio,test_acc,fairness,robustness")
    for e in full.log:
        m = e.metrics
        print(f"{e.iteration},{e.param_count},{e.param_count / first:.3f},{m.test_accuracy:.4f},"
              f"{m.fairness_score:.4f},{m.robustness:.4f}")
    line_chart([e.iteration for e in full.log],
               {"test acc": [e.metrics.test_accuracy for e in full.log],
                "robustness": [e.metrics.robustness for e in full.log],
                "size / initial": [e.param_count / first for e in full.log]},
               "Pruning without a budget", "iteration", "value", path=args.svg)

    for budget in (0.005, 0.01, 0.02, 0.05):
        res = prune_loop(load_checkpoint(blob), ds, PruneThresholds(budget, 100.0))
        print(f"accuracy budget {budget:.3f}: {res.reduction:.1%} smaller, stop {res.stop_reason}")


if __name__ == "__main__":
    main()
