"""Command line entry point: ``trafficppt <command> [options]``.

Every command that writes files leaves a ``manifest.json`` next to them.
``trafficppt rerun --manifest DIR/manifest.json`` replays the recorded
invocation into a fresh directory and checks that each deterministic output
hashes the same.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import inference as inf
from . import numerics as nx
from . import pipeline as pl
from .config import read_sections
from .dataset import SampleSet, split_holdout
from .model import ModelConfig, TrafficPPT, adjacency_for
from .road_graph import RoadNetwork, Edge, load_coordinates, load_network
from .simulator import GenerationError, generate_fleet, read_fleet, write_fleet, write_fleet_weights
from .training import TrainConfig, TrainingError

log = logging.getLogger("trafficppt")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
MANIFEST = "manifest.json"
ABLATION_AXES = {
    "history": [("on", {"use_history": True}), ("off", {"use_history": False})],
    "adjacency": [("on", {"use_adjacency": True}), ("off", {"use_adjacency": False})],
    "discretization": [(f"K={k}" if k else "off", {"K": k}) for k in (0, 10, 20, 30)],
    "pool_shape": [(s, {"adj_pool_shape": s}) for s in ("BV1C", "BVLC", "B11C")],
    "attention_type": [(m, {"attention_mode": m}) for m in ("multi-query", "multi-head")],
}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# --------------------------------------------------------------------------
# manifests


def git_hash(path: str | Path) -> str:
    """Content hash in git's blob format."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    cwd: str
    seed: int
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)
    input_hashes: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    volatile: list[str] = field(default_factory=list)  # wall-clock files, not expected to match
    started: str = ""
    finished: str = ""

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Run:
    """Bookkeeping for one command invocation."""

    def __init__(self, args, argv: list[str], config: dict):
        self.args = args
        self.out = Path(args.out) if getattr(args, "out", None) else None
        self.manifest = RunManifest(args.command, list(argv), os.getcwd(), args.seed, config, started=_now())

    def input(self, name: str, path) -> Path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"--{name.replace('_', '-')}: {p} does not exist")
        if p.is_file():
            self.manifest.inputs[name] = str(p.resolve())
            self.manifest.input_hashes[name] = git_hash(p)
        return p

    def output(self, name: str, volatile: bool = False) -> Path:
        if volatile:
            self.manifest.volatile.append(name)
        return self.out / name

    def finish(self) -> None:
        if self.out is None:
            return
        for p in sorted(self.out.rglob("*")):
            if p.is_file() and p.name != MANIFEST:
                self.manifest.outputs[p.relative_to(self.out).as_posix()] = git_hash(p)
        self.manifest.finished = _now()
        self.manifest.write(self.out)


# --------------------------------------------------------------------------
# configuration


def resolve_seed(args, section: dict) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("TPPT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"TPPT_SEED must be an integer, got {env!r}") from None
    return int(section.get("seed", 0))


def load_bundle(args) -> dict[str, dict[str, str]]:
    if args.config:
        return read_sections(args.config)
    return pl.toy_bundle()


def overrides(args, *names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _bool(text) -> bool:
    return str(text).strip().lower() in ("1", "true", "yes", "on")


def train_config(section: dict, stage: str, seed: int, flags: dict) -> tuple[TrainConfig, float]:
    values = {k: v for k, v in section.items() if k != "holdout"}
    values.update(flags)
    values.update(stage=stage, seed=seed)
    return TrainConfig.from_mapping(values), float(section.get("holdout", 0.02))


def load_samples(path: Path, T: int | None = None) -> SampleSet:
    records = read_fleet(path)
    if not records:
        raise ValueError(f"{path}: no trajectories")
    return SampleSet.from_records(records, T)


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args, run: Run, bundle) -> None:
    net = load_network(run.input("network", args.network))
    section = dict(bundle.get("simulate", {}))
    section.pop("seed", None)
    cfg = pl.sim_config(section, seed=run.manifest.seed, **overrides(args, "vehicles", "histories", "horizon",
                                                                      "sigma", "speed_unit"))
    run.manifest.config = {"simulate": asdict(cfg), "first_id": args.first_id}
    fleet = generate_fleet(net, cfg, first_id=args.first_id)
    run.out.mkdir(parents=True, exist_ok=True)
    write_fleet(fleet, run.output("fleet.txt"))
    write_fleet_weights(fleet, run.output("weights.txt"))
    truncated = sum(r.truncated for r in fleet)
    if truncated:
        log.warning("%d of %d vehicles were truncated at the horizon", truncated, len(fleet))
    print(f"simulated {len(fleet)} vehicles -> {run.out / 'fleet.txt'}")


def _train_command(args, run: Run, bundle, stage: str) -> None:
    net = load_network(run.input("network", args.network))
    samples = load_samples(run.input("fleet", args.fleet))
    mcfg = pl.model_config(bundle.get("model", {}), net, samples.T, samples.N, seed=run.manifest.seed)
    tcfg, holdout = train_config(bundle.get(stage, {}), stage, run.manifest.seed,
                                 overrides(args, "epochs", "lr0", "alpha", "batch_size"))
    train_set, eval_set = split_holdout(samples, holdout) if holdout > 0 else (samples, None)
    init = run.input("init", _checkpoint_file(args.init)) if getattr(args, "init", None) else None
    run.manifest.config = {"model": asdict(mcfg), stage: tcfg.as_dict(), "holdout": holdout}
    run.out.mkdir(parents=True, exist_ok=True)
    tcfg.checkpoint_path = str(run.output("model.ckpt"))
    start = time.perf_counter()
    result = pl.train_stage(stage, train_set, net, mcfg, tcfg, init=init,
                            eval_set=eval_set if eval_set is not None and len(eval_set) else None)
    seconds = time.perf_counter() - start
    result.model.save(run.output("model.ckpt"))
    run.output("model.cfg").write_text(mcfg.to_text(), encoding="utf-8")
    result.curve.write_csv(run.output("loss_curve.csv"))
    if result.checkpoints is not None:
        run.output("checkpoints.txt").write_text(pl.format_checkpoints(result.checkpoints), encoding="utf-8")
    run.output("timing.txt", volatile=True).write_text(f"train_seconds={seconds:.3f}\n", encoding="utf-8")
    last = result.curve.train_loss[-1] if len(result.curve) else float("nan")
    print(f"{stage}: {len(result.curve)} epochs, final train loss {last:.6f} -> {run.out / 'model.ckpt'}")


def _checkpoint_file(path) -> Path:
    p = Path(path)
    return p / "model.ckpt" if p.is_dir() else p


def cmd_pretrain(args, run, bundle):
    _train_command(args, run, bundle, "pretrain")


def cmd_finetune(args, run, bundle):
    _train_command(args, run, bundle, "finetune")


def load_model_dir(run: Run, model_dir) -> tuple[TrafficPPT, Path]:
    d = Path(model_dir)
    mcfg = ModelConfig.from_file(run.input("model_config", d / "model.cfg"))
    model = TrafficPPT(mcfg)
    model.load(run.input("model", d / "model.ckpt"))
    return model, d


def cmd_predict(args, run: Run, bundle) -> None:
    net = load_network(run.input("network", args.network))
    model, d = load_model_dir(run, args.model)
    samples = load_samples(run.input("fleet", args.fleet), model.config.T)
    section = bundle.get("predict", bundle.get("report", {}))
    exclude = args.exclude_offnetwork or _bool(section.get("exclude_offnetwork", "false"))
    if (d / "checkpoints.txt").exists():
        cps = pl.parse_checkpoints(run.input("checkpoints", d / "checkpoints.txt").read_text())
    else:
        alpha = args.alpha if args.alpha is not None else 0.5
        cps = pl.draw_checkpoints(net.node_count, alpha, run.manifest.seed)
    run.manifest.config = {"exclude_offnetwork": exclude, "alpha": cps.alpha,
                           "checkpoints": sorted(cps.nodes)}
    ev = pl.evaluate_volumes(model, net, samples, cps, exclude)
    run.out.mkdir(parents=True, exist_ok=True)
    inf.write_volume_csv(ev.predicted, net, run.output("volume.csv"))
    inf.write_volume_csv(ev.truth, net, run.output("oracle.csv"))
    inf.write_volume_csv(ev.baseline, net, run.output("baseline.csv"))
    print(f"mae={ev.mae:.6f} baseline_mae={ev.baseline_mae:.6f}")


def cmd_evaluate(args, run: Run, bundle) -> None:
    pred = inf.read_volume_csv(run.input("pred", args.pred))
    truth = inf.read_volume_csv(run.input("truth", args.truth))
    score = inf.mae(pred, truth)
    print(f"mae={score:.6f}")
    if run.out is not None:
        run.out.mkdir(parents=True, exist_ok=True)
        run.output("metrics.json").write_text(json.dumps({"mae": score}, sort_keys=True) + "\n", encoding="utf-8")


def cmd_export(args, run: Run, bundle) -> None:
    net = load_network(run.input("network", args.network))
    vol = inf.read_volume_csv(run.input("volume", args.volume))
    if vol.shape[0] != net.edge_count:
        raise ValueError(f"--volume has {vol.shape[0]} rows but the network has {net.edge_count} edges")
    coords = load_coordinates(run.input("coords", args.coords)) if args.coords else None
    written = inf.export_volumes(vol, net, coords, run.out, stem=args.stem)
    for p in written:
        print(p)


def ring_network(V: int, L: int) -> RoadNetwork:
    """Every node links to its next ``L`` neighbours around a ring."""
    edges = sorted({(v, (v - 1 + k) % V + 1) for v in range(1, V + 1) for k in range(1, L + 1)})
    return RoadNetwork(V, tuple(Edge(o, d, 1.0 + ((o * 7 + d) % 5) / 4) for o, d in edges))


def cmd_gradcheck(args, run: Run, bundle) -> None:
    if not args.config:
        bundle = read_sections(run.input("config", pl.data_path("tiny.cfg")))
    values = dict(bundle.get("model", {}))
    values.update(dtype="float64")
    values.setdefault("seed", str(run.manifest.seed))
    mcfg = ModelConfig.from_mapping(values)
    if mcfg.L >= mcfg.V:
        raise ValueError("gradcheck needs L < V")
    model = TrafficPPT(mcfg)
    net = ring_network(mcfg.V, mcfg.L)
    A = adjacency_for(net, mcfg)
    rng = np.random.default_rng(run.manifest.seed)
    X = rng.integers(0, mcfg.V + 1, (2, mcfg.T))
    X_his = rng.integers(0, mcfg.V + 1, (2, mcfg.N, mcfg.T))
    target = np.eye(mcfg.V + 1)[rng.integers(0, mcfg.V + 1, (2, mcfg.T))]
    err = nx.grad_check(lambda: nx.masked_cross_entropy(model(X, X_his, A), target, np.ones((2, mcfg.T))),
                        model.parameters(), h=args.step, coords=args.coords, rng=rng)
    ok = err < args.tolerance
    print(f"max_rel_err={err:.3e} {'pass' if ok else 'fail'} (tolerance {args.tolerance:g})")
    run.manifest.config = {"model": asdict(mcfg), "max_rel_err": err}
    if run.out is not None:
        run.out.mkdir(parents=True, exist_ok=True)
        run.output("gradcheck.txt").write_text(f"max_rel_err={err!r}\npass={ok}\n", encoding="utf-8")
    if not ok:
        raise TrainingError("gradient check failed")


# --------------------------------------------------------------------------
# multi-stage experiments


@dataclass
class Experiment:
    """Shared context for report and ablation runs (picklable for workers)."""

    net: RoadNetwork
    train: SampleSet
    test: SampleSet
    model: dict
    finetune: dict
    seed: int
    exclude: bool
    init: str | None = None


def _finetune_and_score(exp: Experiment, alpha: float, model_overrides: dict) -> dict:
    mcfg = pl.model_config(exp.model, exp.net, exp.train.T, exp.train.N, seed=exp.seed, **model_overrides)
    tcfg, _ = train_config(exp.finetune, "finetune", exp.seed, {"alpha": alpha})
    start = time.perf_counter()
    result = pl.train_stage("finetune", exp.train, exp.net, mcfg, tcfg, init=exp.init, eval_set=exp.test)
    train_seconds = time.perf_counter() - start
    ev = pl.evaluate_volumes(result.model, exp.net, exp.test, result.checkpoints, exp.exclude)
    A = adjacency_for(exp.net, mcfg)
    start = time.perf_counter()
    result.model.forward(exp.test.observations[:50], exp.test.histories[:50], A)
    forward_seconds = time.perf_counter() - start
    return {"curve": result.curve, "mae": ev.mae, "baseline_mae": ev.baseline_mae,
            "train_seconds": train_seconds, "forward_seconds": forward_seconds}


def _map(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _experiment(args, run: Run, bundle) -> Experiment:
    net = load_network(run.input("network", args.network))
    section = dict(bundle.get("simulate", {}))
    section.pop("seed", None)
    sim = pl.sim_config(section, seed=run.manifest.seed)
    report = bundle.get("report", {})
    test_vehicles = int(report.get("test_vehicles", 100))
    train, test = pl.simulate_split(net, sim, test_vehicles)
    run.manifest.config = {"simulate": asdict(sim), "test_vehicles": test_vehicles, "bundle": bundle}
    return Experiment(net, train, test, bundle.get("model", {}), bundle.get("finetune", {}), run.manifest.seed,
                      args.exclude_offnetwork or _bool(report.get("exclude_offnetwork", "false")))


def cmd_report(args, run: Run, bundle) -> None:
    exp = _experiment(args, run, bundle)
    report = bundle.get("report", {})
    alphas = [float(a) for a in report.get("alphas", "0.1 0.2 0.3 0.5").split()]
    run.out.mkdir(parents=True, exist_ok=True)
    timings = []
    # pretraining on the same city, then one fine-tune per checkpoint ratio
    mcfg = pl.model_config(exp.model, exp.net, exp.train.T, exp.train.N, seed=exp.seed)
    tcfg, _ = train_config(bundle.get("pretrain", {}), "pretrain", exp.seed, overrides(args, "epochs"))
    start = time.perf_counter()
    pre = pl.train_stage("pretrain", exp.train, exp.net, mcfg, tcfg, eval_set=exp.test)
    timings.append(("pretrain", time.perf_counter() - start))
    pre.model.save(run.output("pretrained.ckpt"))
    exp.init = str(run.out / "pretrained.ckpt")
    if args.epochs is not None:
        exp.finetune = dict(exp.finetune, epochs=str(args.epochs))
    rows = _map(_finetune_and_score, [(exp, a, {}) for a in alphas], args.workers)

    with open(run.output("report.csv"), "w", encoding="utf-8") as fh:
        fh.write("alpha,mae,baseline_mae,final_train_loss,final_eval_loss\n")
        for a, r in zip(alphas, rows):
            c = r["curve"]
            fh.write(f"{a!r},{r['mae']!r},{r['baseline_mae']!r},{c.train_loss[-1]!r},{c.eval_loss[-1]!r}\n")
    with open(run.output("loss_curves.csv"), "w", encoding="utf-8") as fh:
        fh.write("stage,alpha,epoch,train_loss,eval_loss,lr\n")
        curves = [("pretrain", tcfg.alpha, pre.curve)] + [("finetune", a, r["curve"]) for a, r in zip(alphas, rows)]
        for stage, a, c in curves:
            for e, tr, ev, lr in zip(c.epochs, c.train_loss, c.eval_loss, c.lr):
                fh.write(f"{stage},{a!r},{e},{tr!r},{'' if ev is None else repr(ev)},{lr!r}\n")
    timings += [(f"finetune alpha={a!r}", r["train_seconds"]) for a, r in zip(alphas, rows)]
    with open(run.output("timings.csv", volatile=True), "w", encoding="utf-8") as fh:
        fh.write("stage,seconds\n")
        for name, s in timings:
            fh.write(f"{name},{s:.3f}\n")
    print("alpha  mae       baseline")
    for a, r in zip(alphas, rows):
        print(f"{a:<6g} {r['mae']:.6f}  {r['baseline_mae']:.6f}")


def cmd_ablate(args, run: Run, bundle) -> None:
    exp = _experiment(args, run, bundle)
    if args.epochs is not None:
        exp.finetune = dict(exp.finetune, epochs=str(args.epochs))
    alpha = float(exp.finetune.get("alpha", 0.5))
    rows = ABLATION_AXES[args.axis]
    results = _map(_finetune_and_score, [(exp, alpha, kw) for _, kw in rows], args.workers)
    run.out.mkdir(parents=True, exist_ok=True)
    with open(run.output("ablation.csv"), "w", encoding="utf-8") as fh:
        fh.write("axis,setting,mae,baseline_mae\n")
        for (name, _), r in zip(rows, results):
            fh.write(f"{args.axis},{name},{r['mae']!r},{r['baseline_mae']!r}\n")
    with open(run.output("ablation_timings.csv", volatile=True), "w", encoding="utf-8") as fh:
        fh.write("axis,setting,train_seconds,forward_seconds\n")
        for (name, _), r in zip(rows, results):
            fh.write(f"{args.axis},{name},{r['train_seconds']:.3f},{r['forward_seconds']:.4f}\n")
    for (name, _), r in zip(rows, results):
        print(f"{args.axis}={name}: mae={r['mae']:.6f} forward={r['forward_seconds']:.4f}s")


@contextmanager
def _cwd(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def _replace_flag(argv: list[str], flag: str, value: str) -> list[str]:
    out, skip = [], False
    for i, a in enumerate(argv):
        if skip:
            skip = False
            continue
        if a == flag:
            skip = True
            continue
        if a.startswith(flag + "="):
            continue
        out.append(a)
    return out + [flag, value]


def cmd_rerun(args, run: Run, bundle) -> int:
    manifest = RunManifest.read(run.input("manifest", args.manifest))
    src_dir = Path(args.manifest).resolve().parent
    out = Path(args.out).resolve() if args.out else src_dir.with_name(src_dir.name + "-rerun")
    argv = _replace_flag(manifest.argv, "--seed", str(manifest.seed))
    argv = _replace_flag(argv, "--workers", "1")
    if "out" in _flags_of(manifest.command):
        argv = _replace_flag(argv, "--out", str(out))
    with _cwd(manifest.cwd):
        code = main(argv)
    if code != EXIT_OK:
        return code
    if "out" not in _flags_of(manifest.command):
        return EXIT_OK
    fresh = RunManifest.read(out / MANIFEST)
    same = True
    for name, digest in sorted(manifest.outputs.items()):
        if name in manifest.volatile:
            print(f"skip  {name} (wall-clock)")
            continue
        ok = fresh.outputs.get(name) == digest
        same &= ok
        print(f"{'same' if ok else 'DIFF'}  {name}")
    if not same:
        log.error("rerun outputs differ from %s", args.manifest)
        return EXIT_RUNTIME
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _flags_of(command: str) -> set[str]:
    return {a.dest for a in build_parser().commands[command]._actions}


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (falls back to $TPPT_SEED, then 0)")
    common.add_argument("--workers", type=int, default=1, help="worker processes; 1 forces deterministic mode")
    common.add_argument("--config", help="key=value config file with [section] headers (default: bundled toy city)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    toy_net = str(pl.data_path("toy_grid_5x5.net"))

    p = Parser(prog="trafficppt", description="Trajectory recovery and traffic volume estimation.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=Parser)
    sub.required = True

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic fleet")
    s.add_argument("--network", default=toy_net, help="edge-list network file (default: 5x5 toy grid)")
    s.add_argument("--vehicles", type=int)
    s.add_argument("--histories", type=int)
    s.add_argument("--horizon", type=int)
    s.add_argument("--sigma", type=float)
    s.add_argument("--speed-unit", type=float)
    s.add_argument("--first-id", type=int, default=0, help="id of the first vehicle")
    s.add_argument("--out", required=True)

    for stage in ("pretrain", "finetune"):
        t = sub.add_parser(stage, parents=[common], help=f"{stage} a model on a fleet file")
        t.add_argument("--network", default=toy_net)
        t.add_argument("--fleet", required=True, help="trajectory file written by simulate")
        t.add_argument("--epochs", type=int)
        t.add_argument("--lr0", type=float)
        t.add_argument("--alpha", type=float)
        t.add_argument("--batch-size", type=int)
        if stage == "finetune":
            t.add_argument("--init", help="pretrained model directory or checkpoint; loads the backbone")
        t.add_argument("--out", required=True)

    r = sub.add_parser("predict", parents=[common], help="estimate per-road volumes for a fleet")
    r.add_argument("--network", default=toy_net)
    r.add_argument("--model", required=True, help="directory holding model.ckpt and model.cfg")
    r.add_argument("--fleet", required=True)
    r.add_argument("--alpha", type=float, help="checkpoint ratio when the model carries no checkpoint set")
    r.add_argument("--exclude-offnetwork", action="store_true",
                   help="scale each vehicle's contribution by its on-network probability")
    r.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", parents=[common], help="MAE between two volume CSV files")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out", help="optional directory for metrics.json")

    x = sub.add_parser("export", parents=[common], help="write per-road, per-time and GeoJSON outputs")
    x.add_argument("--network", default=toy_net)
    x.add_argument("--volume", required=True)
    x.add_argument("--coords", help="node coordinate file (node x y)")
    x.add_argument("--stem", default="volume")
    x.add_argument("--out", required=True)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")
    g.add_argument("--step", type=float, default=1e-4)
    g.add_argument("--coords", type=int, default=20, help="coordinates probed per parameter")
    g.add_argument("--tolerance", type=float, default=1e-3)
    g.add_argument("--out", help="optional directory for gradcheck.txt")

    for name, helptext in (("report", "simulate, pretrain, fine-tune per checkpoint ratio, evaluate"),
                           ("ablate", "paired runs along one structural axis")):
        a = sub.add_parser(name, parents=[common], help=helptext)
        a.add_argument("--network", default=toy_net)
        a.add_argument("--epochs", type=int, help="override epochs for every stage")
        a.add_argument("--exclude-offnetwork", action="store_true")
        if name == "ablate":
            a.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
        a.add_argument("--out", required=True)

    m = sub.add_parser("rerun", parents=[common], help="replay a run from its manifest and compare outputs")
    m.add_argument("--manifest", required=True)
    m.add_argument("--out", help="directory for the replay (default: <run dir>-rerun)")
    p.commands = sub.choices
    return p


COMMANDS = {
    "simulate": cmd_simulate, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "predict": cmd_predict,
    "evaluate": cmd_evaluate, "export": cmd_export, "gradcheck": cmd_gradcheck, "report": cmd_report,
    "ablate": cmd_ablate, "rerun": cmd_rerun,
}
CONFIG_SECTION = {"simulate": "simulate", "pretrain": "pretrain", "finetune": "finetune", "gradcheck": "model"}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.workers < 1:
            raise UsageError("--workers must be at least 1")
        bundle = load_bundle(args)
        args.seed = resolve_seed(args, bundle.get(CONFIG_SECTION.get(args.command, ""), {}))
        run = Run(args, argv, {})
        if args.config:
            run.input("config", args.config)
        code = COMMANDS[args.command](args, run, bundle)
        if args.command != "rerun":
            run.finish()
        return code or EXIT_OK
    except UsageError as err:
        print(str(err).rstrip(), file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, FileNotFoundError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (GenerationError, TrainingError, RuntimeError, OSError, ArithmeticError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
