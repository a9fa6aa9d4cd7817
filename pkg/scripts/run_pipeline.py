"""Search, then prune the largest front member and report its routing.

    python scripts/run_pipeline.py --out runs/pipeline [--iterations 10] [--workers 4]
"""

import argparse
import logging
import time
from pathlib import Path

from expertnas.data import DatasetSpec, generate
from expertnas.metrics import write_report_csv
from expertnas.model import load_checkpoint_file, model_id, save_checkpoint
from expertnas.pruning import PruneThresholds, collect_usage, prune_log_csv, prune_loop
from expertnas.search import SearchConfig, run_search, write_pareto_csv


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/pipeline")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=10)
    ap.add_argument("--workers", type=int, default=4)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    ds = generate(DatasetSpec(seed=args.seed))
    cfg = SearchConfig(seed=args.seed, iterations=args.iterations, workers=args.workers)
    t0 = time.perf_counter()
    state = run_search(cfg, ds, out / "search")
    print(f"search: {len(state.archive)} evaluations in {(time.perf_counter() - t0) / 60:.1f} min")
    print(write_pareto_csv(state))

    multi = [r for r in state.front() if sum(r.encoding) > len(r.encoding)]
    if not multi:
        print("front holds only single-expert models; nothing to prune")
        return
    subject = max(multi, key=lambda r: r.param_count)
    model = load_checkpoint_file(out / "search" / "checkpoints" / f"{'-'.join(map(str, subject.encoding))}.moen")
    res = prune_loop(model, ds, PruneThresholds())
    (out / "pruned.moen").write_bytes(save_checkpoint(res.model))
    prune_log_csv(res.log, out / "prune_log.csv")
    print(f"pruned {subject.encoding}: {res.log[0].param_count} -> {res.log[-1].param_count} params "
          f"({res.reduction:.1%}), stop: {res.stop_reason}")

    final = res.log[-1].metrics
    blob = save_checkpoint(res.model)
    write_report_csv([final.row(model_id(blob), res.model.encoding, res.model.parameter_count())],
                     out / "pruned_metrics.csv")
    shares = collect_usage(res.model, ds.test).top_share(2)
    print("top-2 expert share per layer:", " ".join(f"{s:.2f}" for s in shares))


if __name__ == "__main__":
    main()
