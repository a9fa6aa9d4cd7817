"""Command-line entry point: data-gen, train, eval, search, prune.

Settings resolve as built-in defaults, then a flat ``key=value`` config file,
then explicit flags. The resolved settings are written to ``config.txt`` in
the output directory before any work starts.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from .blobfile import BlobError
from .data import Dataset, DatasetError, DatasetSpec, generate, load_dataset, save_dataset
from .metrics import (
    REPORT_COLUMNS,
    SPD_MODES,
    UndefinedMetricError,
    evaluate_model,
    group_accuracy_rows,
    write_report_csv,
)
from .model import (
    ArchitectureEncoding,
    MoEModel,
    ModelConfig,
    RoutingTrace,
    load_checkpoint,
    model_id,
    save_checkpoint,
)
from .numerics import ContractError, ShapeError
from .pruning import PruneThresholds, collect_usage, prune_log_csv, prune_loop
from .search import (
    EvalConfig,
    InfeasibleBoundsError,
    SearchConfig,
    SearchState,
    archive_rows,
    run_search,
    write_pareto_csv,
)
from .svg import line_chart, scatter
from .training import TrainConfig, TrainingDivergedError, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CONTRACT, EXIT_DIVERGED = 0, 2, 3, 4, 5

log = logging.getLogger("expertnas")


class ConfigError(ValueError):
    pass


class OutputExistsError(OSError):
    pass


@dataclass(frozen=True)
class Option:
    name: str
    type: type
    default: object
    commands: tuple[str, ...]
    help: str = ""
    choices: tuple | None = None


ALL = ("data-gen", "train", "eval", "search", "prune")
OPTIONS = (
    Option("seed", int, 0, ALL, "global seed"),
    Option("out", str, "out", ALL, "output directory"),
    Option("dataset", str, None, ("train", "eval", "search", "prune"),
           "dataset directory; omitted means the default synthetic dataset at --seed"),
    Option("n-train", int, 4000, ("data-gen",)),
    Option("n-val", int, 1000, ("data-gen",)),
    Option("n-test", int, 2000, ("data-gen",)),
    Option("encoding", str, "1,1,1,1,1,1,1,1,1", ("train",), "comma-separated expert counts"),
    Option("checkpoint", str, None, ("eval", "prune"), "model checkpoint file"),
    Option("epochs", int, 2, ("train", "search")),
    Option("batch-size", int, 32, ("train", "search")),
    Option("lr", float, 1e-3, ("train", "search")),
    Option("beta", float, 0.2, ("train", "eval", "search", "prune")),
    Option("spd-mode", str, "sum", ("train", "eval", "search", "prune"), choices=SPD_MODES),
    Option("light-threshold", float, 0.5, ("train", "eval", "search", "prune")),
    Option("split", str, "test", ("eval",), "split for the routing trace", choices=("train", "val", "test")),
    Option("min-params", int, None, ("search",)),
    Option("max-params", int, None, ("search",)),
    Option("iterations", int, 10, ("search",)),
    Option("population", int, 16, ("search",)),
    Option("candidates", int, 64, ("search",)),
    Option("select", int, 4, ("search",)),
    Option("workers", int, 4, ("search",)),
    Option("explore", int, 0, ("search",), "1 adds a tree-stage disagreement bonus", choices=(0, 1)),
    Option("resume", str, None, ("search",), "search_state.json to continue from"),
    Option("max-prune-iters", int, 32, ("prune",)),
    Option("acc-drop", float, 0.02, ("prune",), "largest tolerated test-accuracy drop"),
    Option("fairness-drop", float, 0.05, ("prune",), "largest tolerated fairness drop"),
    Option("finetune-epochs", int, 0, ("prune",)),
    Option("scatter-svg", str, "pareto_scatter.svg", ("search",)),
    Option("curve-svg", str, "prune_curve.svg", ("prune",)),
)
OPTION_BY_NAME = {o.name: o for o in OPTIONS}


def _convert(opt: Option, raw: str):
    if raw.lower() in ("", "none"):
        return None
    try:
        value = opt.type(raw)
    except ValueError:
        raise ConfigError(f"{opt.name}: cannot parse {raw!r} as {opt.type.__name__}") from None
    if opt.choices is not None and value not in opt.choices:
        raise ConfigError(f"{opt.name}: {value!r} not in {list(opt.choices)}")
    return value


def read_config_file(path, command: str) -> dict:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("_", "-")
        opt = OPTION_BY_NAME.get(key)
        if opt is None:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        if command not in opt.commands:
            continue
        values[key] = _convert(opt, raw)
    return values


def resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = {o.name: o.default for o in OPTIONS if command in o.commands}
    if args.config is not None:
        cfg.update(read_config_file(args.config, command))
    for name in cfg:
        v = getattr(args, name.replace("-", "_"), None)
        if v is not None:
            cfg[name] = v
    return cfg


def echo_config(cfg: dict, command: str, out: Path) -> None:
    if (out / "config.txt").exists():
        raise OutputExistsError(f"{out} already holds a run; choose a fresh --out")
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"command={command}"] + [f"{k}={'' if v is None else v}" for k, v in sorted(cfg.items())]
    (out / "config.txt").write_text("\n".join(lines) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expertnas", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in ALL:
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="flat key=value file; flags override it")
        for o in OPTIONS:
            if command in o.commands:
                # flag defaults stay None so that the config file can fill them
                p.add_argument(f"--{o.name}", type=o.type, default=None, choices=o.choices, help=o.help)
    return parser


def _require(cfg: dict, key: str) -> str:
    if cfg.get(key) is None:
        raise ConfigError(f"--{key} is required")
    return cfg[key]


def _dataset(cfg: dict) -> Dataset:
    if cfg.get("dataset") is None:
        return generate(DatasetSpec(seed=cfg["seed"]))
    return load_dataset(cfg["dataset"])


def _read_checkpoint(path: str) -> tuple[MoEModel, bytes]:
    blob = Path(path).read_bytes()
    return load_checkpoint(blob), blob


def _write_rows(path: Path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_data_gen(cfg: dict, out: Path) -> None:
    spec = DatasetSpec(n_train=cfg["n-train"], n_val=cfg["n-val"], n_test=cfg["n-test"], seed=cfg["seed"])
    save_dataset(generate(spec), out / "dataset")


def _metrics_row(model: MoEModel, blob: bytes, ds: Dataset, cfg: dict):
    rep = evaluate_model(model, ds, cfg["beta"], cfg["spd-mode"], cfg["light-threshold"])
    return rep, rep.row(model_id(blob), model.encoding, model.parameter_count())


def cmd_train(cfg: dict, out: Path) -> None:
    try:
        encoding = ArchitectureEncoding.parse(cfg["encoding"])
        mcfg = ModelConfig()
        encoding.validate(mcfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ds = _dataset(cfg)
    model = MoEModel(mcfg, encoding, seed=cfg["seed"])
    losses = train(model, ds.train, TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch-size"],
                                                learning_rate=cfg["lr"], seed=cfg["seed"]))
    blob = save_checkpoint(model)
    (out / "model.moen").write_bytes(blob)
    _, row = _metrics_row(model, blob, ds, cfg)
    write_report_csv([row], out / "metrics.csv")
    _write_rows(out / "train_loss.csv", [{"epoch": i, "loss": repr(v)} for i, v in enumerate(losses)],
                ("epoch", "loss"))


def cmd_eval(cfg: dict, out: Path) -> None:
    model, blob = _read_checkpoint(_require(cfg, "checkpoint"))
    ds = _dataset(cfg)
    rep, row = _metrics_row(model, blob, ds, cfg)
    write_report_csv([row], out / "metrics.csv")
    _write_rows(out / "group_accuracy.csv", group_accuracy_rows(rep.group),
                ("group", "count", "accuracy", "is_minority"))

    split = ds[cfg["split"]]
    _, token_idx = model.predict(split.images)
    per_image = RoutingTrace(token_idx, split.groups).per_image
    L = model.config.n_layers
    trace_cols = ["index", "id", "group", "label"] + [f"layer{l}" for l in range(L)]
    trace_rows = []
    for i in range(len(split)):
        r = {"index": i, "id": int(split.ids[i]), "group": int(split.groups[i]), "label": int(split.labels[i])}
        r.update({f"layer{l}": int(per_image[i, l]) for l in range(L)})
        trace_rows.append(r)
    _write_rows(out / "routing_trace.csv", trace_rows, trace_cols)

    stats = collect_usage(model, split)
    masks = model.masks()
    usage = [{"layer": l, "expert": e, "active": int(masks[l][e]), "count": int(stats.counts[l][e]),
              "share": repr(float(stats.counts[l][e] / stats.total_tokens[l]))}
             for l in range(L) for e in range(len(masks[l]))]
    _write_rows(out / "expert_usage.csv", usage, ("layer", "expert", "active", "count", "share"))
    top2 = stats.top_share(2)
    _write_rows(out / "top2_share.csv",
                [{"layer": l, "active_experts": int(masks[l].sum()), "top2_share": repr(top2[l])} for l in range(L)],
                ("layer", "active_experts", "top2_share"))


def cmd_search(cfg: dict, out: Path) -> None:
    ds = _dataset(cfg)
    state = None
    if cfg.get("resume") is not None:
        state = SearchState.load(cfg["resume"])
        scfg = state.config
    else:
        tcfg = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch-size"], learning_rate=cfg["lr"],
                           seed=cfg["seed"])
        try:
            scfg = SearchConfig(
                seed=cfg["seed"], initial_population=cfg["population"], iterations=cfg["iterations"],
                n_candidates=cfg["candidates"], n_select=cfg["select"], min_params=cfg["min-params"],
                max_params=cfg["max-params"], workers=cfg["workers"], explore=bool(cfg["explore"]),
                model_seed=cfg["seed"],
                eval=EvalConfig(ModelConfig(), tcfg, cfg["beta"], cfg["spd-mode"], cfg["light-threshold"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    state = run_search(scfg, ds, out, state=state)
    write_pareto_csv(state, out / "pareto.csv")
    _write_rows(out / "archive.csv", archive_rows(state), list(REPORT_COLUMNS) + ["failed"])
    ok = state.successful()
    front_ids = {id(r) for r in state.front()}
    scatter([r.objectives["fairness"] for r in ok], [r.objectives["test_accuracy"] for r in ok],
            "Search archive (front in red)", "fairness", "test accuracy",
            highlight=[i for i, r in enumerate(ok) if id(r) in front_ids], path=out / cfg["scatter-svg"])


def cmd_prune(cfg: dict, out: Path) -> None:
    model, _ = _read_checkpoint(_require(cfg, "checkpoint"))
    ds = _dataset(cfg)
    thresholds = PruneThresholds(cfg["acc-drop"], cfg["fairness-drop"], cfg["max-prune-iters"])
    finetune = TrainConfig(epochs=cfg["finetune-epochs"], seed=cfg["seed"]) if cfg["finetune-epochs"] else None
    result = prune_loop(model, ds, thresholds, cfg["beta"], cfg["spd-mode"], cfg["light-threshold"], finetune)
    (out / "pruned.moen").write_bytes(save_checkpoint(result.model))
    prune_log_csv(result.log, out / "prune_log.csv")
    (out / "prune_stop.txt").write_text(result.stop_reason + "\n")
    it = [e.iteration for e in result.log]
    first = result.log[0]
    series = {
        "test acc": [e.metrics.test_accuracy for e in result.log],
        "robustness": [e.metrics.robustness for e in result.log],
        "size / initial": [e.param_count / first.param_count for e in result.log],
    }
    line_chart(it, series, "Pruning iterations", "iteration", "value", path=out / cfg["curve-svg"])


COMMANDS = {"data-gen": cmd_data_gen, "train": cmd_train, "eval": cmd_eval, "search": cmd_search,
            "prune": cmd_prune}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, InfeasibleBoundsError)):
        return EXIT_CONFIG
    if isinstance(exc, TrainingDivergedError):
        return EXIT_DIVERGED
    if isinstance(exc, (OSError, BlobError, DatasetError)):
        return EXIT_IO
    if isinstance(exc, (ContractError, ShapeError, UndefinedMetricError, ValueError)):
        return EXIT_CONTRACT
    raise exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        out = Path(cfg["out"])
        echo_config(cfg, args.command, out)
        COMMANDS[args.command](cfg, out)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = _exit_code(exc)
        msg = " ".join(str(exc).split())
        print(f"error {type(exc).__name__} (exit {code}): {msg}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
