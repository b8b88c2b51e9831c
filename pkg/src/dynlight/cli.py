"""Experiment harness: ``dynlight <verb> [--config FILE] [--out DIR] [--seeds 0,1,2] [--override k=v ...]``.

Every run writes into a fresh timestamped directory below the output root
(``--out``, else ``$DYNLIGHT_OUT``, else ``./runs``), so earlier runs are never
touched. CSV columns are fixed and rows are sorted, so reruns of the same
configuration produce identical files.
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import agent
from .datasets import PRESETS, get_preset
from .errors import ConfigError, DynLightError
from .flow import load_flow, save_flow
from .metrics import EpisodeResult, fmt, summarize, transferability, write_trip_csv
from .network import load_roadnet, save_roadnet
from .policies import FixedTimeController, PhasePolicyController, make_selector
from .sim import SimConfig, run_episode

log = logging.getLogger("dynlight")

VERBS = ("gen-data", "train", "eval", "compare", "transfer", "sweep")
BASELINES = ("fixedtime", "mql", "emp", "cyclical")
LEARNED = ("dynlight", "dynlight-c")
METHODS = BASELINES + LEARNED
SUMMARY_COLUMNS = ("method", "dataset", "seed", "adjusted_att", "throughput", "undrained")
SWEEP_AXES = {
    "duration_sets": ("duration_set", list(agent.DURATION_SETS)),
    "phase_sets": ("phases", [4, 8]),
    "encoders": ("encoder", ["nvs", "nv", "ql", "tmp"]),
    "phase_policies": ("phase_policy", ["mql", "emp"]),
}
TRANSFER_SEED_OFFSET = 1000

DEFAULTS = {
    "datasets": ["jinan_bench"],
    "methods": ["fixedtime", "mql"],
    "seeds": [0, 1, 2],
    "horizon": 3600,
    "phases": 4,
    "drain": True,
    "jobs": 1,
    "sim": {},
    "dynlight": {},
    "sweep": {"axis": None, "values": None},
    "checkpoint": None,
    "eval_phase_policy": None,
    "dump_trips": False,
}


# configuration ------------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    command: str
    config: dict
    out_dir: Path
    seeds: list[int]
    overrides: list[str] = field(default_factory=list)


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_override(config: dict, item: str) -> None:
    """Set a dotted key from ``key=value``; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = config
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(path=None, overrides=()) -> dict:
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"config file {p} must hold a mapping")
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}; valid: {sorted(DEFAULTS)}")
        config = _merge(config, data)
        base = p.parent
        for ds in config["datasets"]:
            if isinstance(ds, dict):
                for key in ("roadnet", "flow"):
                    if key in ds and not Path(ds[key]).is_absolute():
                        ds[key] = str(base / ds[key])
    for item in overrides:
        apply_override(config, item)
    return config


def _dataset_name(ds) -> str:
    return ds if isinstance(ds, str) else ds["name"]


def resolve_dataset(ds, seed: int, phases: int, horizon: int):
    """(network, flow) for a preset name or a {name, roadnet, flow} / {name, preset, rate} entry."""
    if isinstance(ds, str):
        preset = get_preset(ds)
        net = preset.network(phases)
        return net, preset.flow(net, seed, horizon=horizon)
    if not isinstance(ds, dict) or "name" not in ds:
        raise ConfigError(f"dataset entry {ds!r} needs a name")
    if "roadnet" in ds:
        net = load_roadnet(ds["roadnet"])
        if "flow" not in ds:
            raise ConfigError(f"dataset {ds['name']} has a roadnet but no flow file")
        return net, load_flow(ds["flow"], net)
    preset = get_preset(ds.get("preset", ds["name"]))
    net = preset.network(phases)
    return net, preset.flow(net, seed, rate=ds.get("rate"), horizon=horizon)


def dynlight_config(config: dict, seed: int, **extra) -> agent.DynLightConfig:
    d = dict(config.get("dynlight") or {})
    d.setdefault("horizon", config["horizon"])
    d["sim"] = {**(config.get("sim") or {}), **d.get("sim", {})}
    d["seed"] = seed
    d.update(extra)
    d.pop("phases", None)
    try:
        return agent.DynLightConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"bad dynlight config: {exc}") from None


def check_methods(methods) -> None:
    if not methods:
        raise ConfigError(f"no methods given; valid: {list(METHODS)}")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; valid: {list(METHODS)}")


# experiment cells -----------------------------------------------------------------------

@dataclass
class CellResult:
    method: str
    dataset: str
    seed: int
    adjusted_att: float | None
    throughput: int
    undrained: bool
    episodes: list[EpisodeResult] = field(default_factory=list)
    checkpoint: dict | None = None
    extra: dict = field(default_factory=dict)
    trips: object = None

    def row(self) -> dict:
        return {"method": self.method, "dataset": self.dataset, "seed": self.seed,
                "adjusted_att": fmt(self.adjusted_att), "throughput": self.throughput,
                "undrained": int(self.undrained)}


def baseline_controller(method: str):
    if method == "fixedtime":
        return FixedTimeController()
    return PhasePolicyController(make_selector(method))


def _from_episode(method, dataset, seed, res: EpisodeResult, **kw) -> CellResult:
    return CellResult(method, dataset, seed, res.adjusted_att, res.throughput, res.undrained, [res], **kw)


def _from_training(method, dataset, seed, tr: agent.TrainResult, last_n: int) -> CellResult:
    att = summarize(tr.curve, last=last_n).mean if tr.curve else None
    tail = tr.curve[-last_n:]
    return CellResult(method, dataset, seed, att, tail[-1].throughput, any(r.undrained for r in tail),
                      list(tr.curve), tr.checkpoint.to_dict(),
                      {"transitions": tr.transitions})


def run_cell(config: dict, method: str, ds, seed: int, overrides: dict | None = None) -> CellResult:
    """One (method, dataset, seed) experiment; ``overrides`` patch the dynlight config."""
    phases = int((overrides or {}).get("phases", config["phases"]))
    net, flow = resolve_dataset(ds, seed, phases, config["horizon"])
    name = _dataset_name(ds)
    sim_cfg = SimConfig(**(config.get("sim") or {}))
    if method in BASELINES:
        res, trips = run_episode(net, flow, baseline_controller(method), config["horizon"], drain=config["drain"],
                                 seed=seed, config=sim_cfg, return_log=True)
        return _from_episode(method, name, seed, res, trips=trips if config.get("dump_trips") else None)
    dl = dynlight_config(config, seed, **(overrides or {}))
    tr = agent.train(net, flow, dl)
    if method == "dynlight":
        return _from_training(method, name, seed, tr, dl.last_n)
    ctrl = agent.make_dynlight_c(tr.checkpoint)
    res = run_episode(net, flow, ctrl, config["horizon"], drain=config["drain"], seed=seed, config=dl.sim_config())
    return _from_episode(method, name, seed, res, checkpoint=tr.checkpoint.to_dict())


def _run_cell_packed(args):
    return run_cell(*args)


def run_cells(config: dict, cells: list[tuple]) -> list[CellResult]:
    """Run cells, in worker processes when ``jobs`` > 1; results keep the input order."""
    jobs = int(config.get("jobs") or 1)
    packed = [(config, *c) for c in cells]
    if jobs > 1 and len(packed) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_cell_packed, packed))
    return [_run_cell_packed(p) for p in packed]


# output ---------------------------------------------------------------------------------

def make_run_dir(root, verb: str) -> Path:
    root = Path(root)
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = root / f"{verb}-{stamp}"
    path, k = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{k}")
        k += 1
    path.mkdir(parents=True)
    return path


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_summary(path: Path, results: list[CellResult]) -> None:
    rows = sorted((r.row() for r in results), key=lambda r: (r["dataset"], r["method"], r["seed"]))
    write_csv(path, SUMMARY_COLUMNS, rows)


def aggregate(results: list[CellResult], key=lambda r: (r.method, r.dataset)) -> dict:
    groups: dict = {}
    for r in results:
        if r.adjusted_att is not None:
            groups.setdefault(key(r), []).append(r.adjusted_att)
    out = {}
    for k, vals in groups.items():
        row = summarize([[v] for v in vals], last=1)
        out[k] = (row.mean, row.sd)
    return out


def write_aggregate(path: Path, agg: dict, key_names=("method", "dataset")) -> None:
    rows = [dict(zip(key_names, k), mean=fmt(m), sd=fmt(s)) for k, (m, s) in sorted(agg.items(), key=lambda i: i[0])]
    write_csv(path, (*key_names, "mean", "sd"), rows)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "dynlight"
    return plt


def _save_svg(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")


def plot_grouped_bars(path: Path, agg: dict, title: str) -> None:
    plt = _pyplot()
    methods = sorted({m for m, _ in agg})
    datasets = sorted({d for _, d in agg})
    width = 0.8 / max(1, len(methods))
    fig, ax = plt.subplots(figsize=(max(4, 1.6 * len(datasets) + 2), 3.5))
    for k, m in enumerate(methods):
        xs = [i + k * width for i in range(len(datasets))]
        means = [agg.get((m, d), (0, None))[0] for d in datasets]
        sds = [agg.get((m, d), (0, None))[1] or 0 for d in datasets]
        ax.bar(xs, means, width, yerr=sds, label=m, capsize=2)
    ax.set_xticks([i + width * (len(methods) - 1) / 2 for i in range(len(datasets))])
    ax.set_xticklabels(datasets)
    ax.set_ylabel("adjusted ATT (s)")
    ax.set_title(title)
    ax.legend(fontsize="small")
    _save_svg(fig, path)
    plt.close(fig)


def plot_sweep(path: Path, agg: dict, axis: str) -> None:
    plt = _pyplot()
    values = list(dict.fromkeys(v for v, _ in agg))
    datasets = sorted({d for _, d in agg})
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for d in datasets:
        means = [agg.get((v, d), (float("nan"), None))[0] for v in values]
        ax.plot([str(v) for v in values], means, marker="o", label=d)
    ax.set_xlabel(axis)
    ax.set_ylabel("adjusted ATT (s)")
    ax.legend(fontsize="small")
    _save_svg(fig, path)
    plt.close(fig)


def plot_heatmap(path: Path, names: list[str], matrix: list[list[float]]) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 1.0 * len(names) + 1.5))
    im = ax.imshow(matrix, cmap="coolwarm")
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("evaluated on")
    ax.set_ylabel("trained on")
    for i, row in enumerate(matrix):
        for j, v in enumerate(row):
            ax.text(j, i, f"{v:.3f}", ha="center", va="center", fontsize=8)
    fig.colorbar(im, ax=ax)
    _save_svg(fig, path)
    plt.close(fig)


def write_curves(path: Path, results: list[CellResult]) -> None:
    rows = []
    for r in results:
        for ep, res in enumerate(r.episodes):
            rows.append({"method": r.method, "dataset": r.dataset, "seed": r.seed, "episode": ep,
                         "adjusted_att": fmt(res.adjusted_att), "throughput": res.throughput,
                         "undrained": int(res.undrained)})
    write_csv(path, ("method", "dataset", "seed", "episode", "adjusted_att", "throughput", "undrained"), rows)


def _warn_undrained(results) -> None:
    for r in results:
        if r.undrained:
            warnings.warn(f"{r.method} on {r.dataset} seed {r.seed} did not drain; adjusted ATT is a lower bound",
                          stacklevel=2)


# verbs ----------------------------------------------------------------------------------

def cmd_gen_data(spec: ExperimentSpec) -> int:
    cfg = spec.config
    for ds in cfg["datasets"]:
        name = _dataset_name(ds)
        for seed in spec.seeds:
            net, flow = resolve_dataset(ds, seed, cfg["phases"], cfg["horizon"])
            target = spec.out_dir / name
            target.mkdir(exist_ok=True)
            save_roadnet(net, target / "roadnet.json")
            save_flow(flow, target / f"flow_seed{seed}.json")
            log.info("%s seed %d: %d vehicles", name, seed, len(flow))
    return 0


def cmd_train(spec: ExperimentSpec) -> list[CellResult]:
    cfg = spec.config
    cells = [("dynlight", ds, s) for ds in cfg["datasets"] for s in spec.seeds]
    results = run_cells(cfg, cells)
    for r in results:
        Path(spec.out_dir / f"checkpoint_{r.dataset}_seed{r.seed}.json").write_text(json.dumps(r.checkpoint))
    write_curves(spec.out_dir / "curve.csv", results)
    write_summary(spec.out_dir / "summary.csv", results)
    return results


def cmd_eval(spec: ExperimentSpec) -> list[CellResult]:
    """Baselines listed under ``methods`` plus, with ``checkpoint`` set, the frozen learned controller."""
    cfg = spec.config
    methods = [m for m in cfg["methods"] if m in BASELINES]
    results = run_cells(cfg, [(m, ds, s) for m in methods for ds in cfg["datasets"] for s in spec.seeds])
    if cfg.get("checkpoint"):
        ckpt = agent.load_checkpoint(cfg["checkpoint"])
        policy = cfg.get("eval_phase_policy") or ckpt.config.phase_policy
        actions = (cfg.get("dynlight") or {}).get("duration_set")
        label = "dynlight-c" if policy == "cyclical" else "dynlight"
        for ds in cfg["datasets"]:
            for seed in spec.seeds:
                net, flow = resolve_dataset(ds, seed, cfg["phases"], cfg["horizon"])
                ctrl = agent.make_controller(ckpt, policy, actions)
                res, trips = run_episode(net, flow, ctrl, cfg["horizon"], drain=cfg["drain"], seed=seed,
                                         config=ckpt.config.sim_config(), return_log=True)
                results.append(_from_episode(label, _dataset_name(ds), seed, res,
                                             trips=trips if cfg.get("dump_trips") else None))
    if not results:
        raise ConfigError("nothing to evaluate: list baseline methods or set checkpoint")
    write_summary(spec.out_dir / "summary.csv", results)
    for r in results:
        path = spec.out_dir / f"result_{r.method}_{r.dataset}_seed{r.seed}.json"
        path.write_text(r.episodes[-1].to_json() + "\n")
        if r.trips is not None:
            write_trip_csv(r.trips, spec.out_dir / f"trips_{r.method}_{r.dataset}_seed{r.seed}.csv")
    return results


def cmd_compare(spec: ExperimentSpec) -> list[CellResult]:
    cfg = spec.config
    check_methods(cfg["methods"])
    if not cfg["datasets"]:
        raise ConfigError("compare needs at least one dataset")
    cells = [(m, ds, s) for m in cfg["methods"] for ds in cfg["datasets"] for s in spec.seeds]
    results = run_cells(cfg, cells)
    write_summary(spec.out_dir / "summary.csv", results)
    agg = aggregate(results)
    write_aggregate(spec.out_dir / "aggregate.csv", agg)
    plot_grouped_bars(spec.out_dir / "compare.svg", agg, "adjusted average travel time")
    return results


def cmd_sweep(spec: ExperimentSpec) -> list[CellResult]:
    cfg = spec.config
    axis = (cfg.get("sweep") or {}).get("axis")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis {axis!r} unknown; valid: {sorted(SWEEP_AXES)}")
    key, default_values = SWEEP_AXES[axis]
    values = cfg["sweep"].get("values")
    values = default_values if values is None else list(values)
    if not values:
        raise ConfigError(f"sweep axis {axis} has no values")
    cells, labels = [], []
    for v in values:
        for ds in cfg["datasets"]:
            for s in spec.seeds:
                cells.append(("dynlight", ds, s, {key: v}))
                labels.append(v if not isinstance(v, list) else ",".join(map(str, v)))
    results = run_cells(cfg, cells)
    rows = []
    for label, r in zip(labels, results):
        r.extra["value"] = label
        rows.append({"axis": axis, "value": label, **{k: v for k, v in r.row().items() if k != "method"}})
    write_csv(spec.out_dir / "sweep.csv", ("axis", "value", "dataset", "seed", "adjusted_att", "throughput",
                                           "undrained"), rows)
    agg = aggregate(results, key=lambda r: (r.extra["value"], r.dataset))
    write_aggregate(spec.out_dir / "sweep_summary.csv", agg, key_names=("value", "dataset"))
    plot_sweep(spec.out_dir / "sweep.svg", agg, axis)
    return results


def cmd_transfer(spec: ExperimentSpec) -> list[list[float]]:
    """Train on every dataset, evaluate every checkpoint on every dataset with held-out demand seeds."""
    cfg = spec.config
    datasets = cfg["datasets"]
    if len(datasets) < 2:
        raise ConfigError("transfer needs at least two datasets")
    names = [_dataset_name(d) for d in datasets]
    trained = run_cells(cfg, [("dynlight", ds, s) for ds in datasets for s in spec.seeds])
    by_key = {(r.dataset, r.seed): r for r in trained}
    actions = (cfg.get("dynlight") or {}).get("duration_set")
    matrix, rows = [], []
    for i, src in enumerate(names):
        row = []
        for j, dst in enumerate(datasets):
            values = []
            for seed in spec.seeds:
                cell = by_key[(src, seed)]
                ckpt = agent.checkpoint_from_dict(cell.checkpoint, actions)
                net, flow = resolve_dataset(dst, seed + TRANSFER_SEED_OFFSET, cfg["phases"], cfg["horizon"])
                res = run_episode(net, flow, agent.make_controller(ckpt), cfg["horizon"], drain=cfg["drain"],
                                  seed=seed, config=ckpt.config.sim_config())
                values.append(transferability(cell.adjusted_att, res.adjusted_att))
            e = sum(values) / len(values)
            row.append(e)
            rows.append({"trained_on": src, "evaluated_on": names[j], "E": f"{e:.4f}"})
        matrix.append(row)
    with open(spec.out_dir / "transfer.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trained_on", *names])
        for src, row in zip(names, matrix):
            w.writerow([src, *(f"{e:.4f}" for e in row)])
    write_csv(spec.out_dir / "transfer_long.csv", ("trained_on", "evaluated_on", "E"), rows)
    write_summary(spec.out_dir / "train_summary.csv", trained)
    plot_heatmap(spec.out_dir / "transfer.svg", names, matrix)
    return matrix


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "transfer": cmd_transfer,
    "sweep": cmd_sweep,
}


def validate_config(command: str, config: dict) -> None:
    """Fail before any output directory is created."""
    for ds in config["datasets"]:
        if isinstance(ds, str):
            get_preset(ds)
        elif not isinstance(ds, dict) or "name" not in ds:
            raise ConfigError(f"dataset entry {ds!r} needs a name")
    if command == "compare":
        check_methods(config["methods"])
    if command == "eval":
        bad = [m for m in config["methods"] if m not in BASELINES]
        if bad:
            raise ConfigError(f"eval runs baselines {list(BASELINES)} and checkpoints; got {bad}")
    if command == "sweep":
        axis = (config.get("sweep") or {}).get("axis")
        if axis not in SWEEP_AXES:
            raise ConfigError(f"sweep axis {axis!r} unknown; valid: {sorted(SWEEP_AXES)}")
    if command in ("train", "sweep", "transfer", "compare"):
        dynlight_config(config, 0)
    SimConfig(**(config.get("sim") or {}))


# entry point ----------------------------------------------------------------------------

def parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynlight", description="Traffic signal control experiments.")
    parser.add_argument("command", choices=VERBS)
    parser.add_argument("--config", help="YAML or JSON experiment file")
    parser.add_argument("--out", help="output root (default: $DYNLIGHT_OUT or ./runs)")
    parser.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="set a config entry, dotted keys allowed (dynlight.episodes=10)")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.epilog = "datasets: " + ", ".join(sorted(PRESETS)) + "; methods: " + ", ".join(METHODS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config, args.override)
        seeds = parse_seeds(args.seeds) if args.seeds else [int(s) for s in config["seeds"]]
        if not seeds:
            raise ConfigError("no seeds given")
        validate_config(args.command, config)
        root = args.out or os.environ.get("DYNLIGHT_OUT") or "runs"
        out_dir = make_run_dir(root, args.command)
        spec = ExperimentSpec(args.command, config, out_dir, seeds, args.override)
        (out_dir / "config.json").write_text(json.dumps({"command": args.command, "seeds": seeds, **config},
                                                        indent=1, sort_keys=True) + "\n")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = COMMANDS[args.command](spec)
            if isinstance(result, list) and result and isinstance(result[0], CellResult):
                _warn_undrained(result)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    except DynLightError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(out_dir)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
