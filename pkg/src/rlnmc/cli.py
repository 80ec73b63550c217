"""Command-line front end: instance generation, solving, training, evaluation and traces.

Every subcommand accepts ``--config FILE`` (INI; keys of the ``[common]``
section and of the section named after the subcommand), ``--seed``,
``--threads`` and ``--out``.  Command-line flags win over the config file,
which wins over presets.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .anneal import RULES, Schedule, SuccessCriterion, Trace, run_sa
from .generate import GenerationError, GeneratorSpec, generate
from .metrics import (
    RECORD_VERSION,
    MetricsError,
    RunRecord,
    bootstrap_percentile,
    diversity,
    group_by_instance,
    tau_with_overhead,
    trajectory_diagnostics,
)
from .nmc import NmcConfig, NmcConfigError, budget_split, run_nmc
from .policy import CheckpointError, RLPolicy, load_params, save_params
from .problem import DimacsError, Model, parse_dimacs, parse_poly, write_dimacs
from .rng import stream
from .train import PRESETS as TRAIN_PRESETS
from .train import TrainingError, train_rlnmc

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_DIVERGED = 5


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

_SF = dict(family="scale-free", k=4, alpha=9.2, b=3.0, beta_i=2.0, beta_f=8.0, beta_nmc=5.0,
           r=4.5, n_cycles=3, n_sw=100, n_steps=53, threshold=0.0)
_UF = dict(family="uniform", k=4, alpha=9.884, b=3.0, beta_i=3.0, beta_f=8.0, beta_nmc=5.0,
           r=3.0, n_cycles=3, n_steps=50, threshold=1.0)

PRESETS: dict[str, dict] = {
    "sf250": dict(_SF, n=250, sweeps=30_000, replicas=4096, train="scalefree"),
    "uf500": dict(_UF, n=500, n_sw=200, sweeps=50_000, replicas=2048, train="uniform"),
    "uf1000": dict(_UF, n=1000, n_sw=400, sweeps=100_000, replicas=1024, train="uniform"),
    "uf2000": dict(_UF, n=2000, n_sw=800, sweeps=200_000, replicas=512, train="uniform"),
}

SOLVE_DEFAULTS = dict(beta_i=2.0, beta_f=8.0, beta_nmc=5.0, sweeps=1000, r=4.5, n_cycles=3, n_sw=100,
                      n_steps=5, threshold=0.0, replicas=16)


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved settings of a ``solve`` or ``trace`` run."""

    algorithm: str
    beta_i: float
    beta_f: float
    beta_nmc: float
    sweeps: int
    r: float
    n_cycles: int
    n_sw: int
    n_steps: int
    threshold: float
    replicas: int
    seed: int
    rule: str = "metropolis"
    checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.algorithm not in ("sa", "nmc", "rlnmc"):
            raise UsageError(f"unknown algorithm {self.algorithm!r}")
        if self.algorithm == "rlnmc" and not self.checkpoint:
            raise UsageError("rlnmc needs --checkpoint")
        if self.replicas < 1 or self.sweeps < 1:
            raise UsageError("replicas and sweeps must be positive")
        if self.rule not in RULES:
            raise UsageError(f"unknown rule {self.rule!r}")

    def schedule(self) -> Schedule:
        return Schedule(self.beta_i, self.beta_f, self.sweeps)

    def nmc(self) -> NmcConfig:
        r = math.inf if self.algorithm == "rlnmc" else self.r
        return NmcConfig(r=r, n_cycles=self.n_cycles, n_sw=self.n_sw, beta_nmc=self.beta_nmc,
                         n_steps=self.n_steps)

    def criterion(self) -> SuccessCriterion:
        return SuccessCriterion(self.threshold)


def resolve_experiment(args) -> ExperimentConfig:
    preset = PRESETS[args.preset] if args.preset else {}
    values = {}
    for name in SOLVE_DEFAULTS:
        v = getattr(args, name)
        values[name] = v if v is not None else preset.get(name, SOLVE_DEFAULTS[name])
    return ExperimentConfig(algorithm=args.algorithm, seed=args.seed, rule=args.rule,
                            checkpoint=args.checkpoint, **values)


# ---------------------------------------------------------------------------
# I/O helpers
# ---------------------------------------------------------------------------


def load_instance(path: Path) -> Model:
    text = path.read_text()
    return parse_poly(text) if path.suffix == ".poly" else parse_dimacs(text)


def instance_paths(items: Sequence[str]) -> list[Path]:
    out: list[Path] = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix in (".cnf", ".poly")))
        elif p.exists():
            out.append(p)
        else:
            raise FileNotFoundError(f"no such instance file or directory: {item}")
    if not out:
        raise UsageError("no instances given")
    return out


def _energy(e):
    """Integral energies are written as integers."""
    e = float(e)
    return int(e) if e.is_integer() else e


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True) + "\n"


def header(command: str, config: dict) -> dict:
    return {"version": RECORD_VERSION, "kind": "header", "command": command, "rlnmc": __version__,
            "config": config}


def read_records(paths: Sequence[str]) -> list[RunRecord]:
    """Run records of LDJ files.  Every line must carry a known version."""
    records = []
    for path in paths:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise MetricsError(f"{path}:{lineno}: not a JSON record ({exc.msg})") from None
                if d.get("version") != RECORD_VERSION:
                    raise MetricsError(f"{path}:{lineno}: unsupported record version {d.get('version')!r}")
                if d.get("kind") != "run":
                    continue
                if d.get("instance") is None:
                    raise MetricsError(f"{path}:{lineno}: run record without an instance key")
                records.append(RunRecord.from_dict(d))
    if not records:
        raise MetricsError("no run records found")
    return records


def _open_out(path: Optional[str]):
    if path is None or path == "-":
        return sys.stdout, False
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline=""), True


def _write_csv(path: Optional[str], head: Sequence[str], rows) -> None:
    fh, close = _open_out(path)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(head)
        w.writerows(rows)
    finally:
        if close:
            fh.close()


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

FAMILIES = {"sf": "scale-free", "scale-free": "scale-free", "uf": "uniform", "uniform": "uniform"}


def cmd_gen(args) -> int:
    preset = PRESETS[args.preset] if args.preset else {}
    pick = lambda name, default: getattr(args, name) if getattr(args, name) is not None else preset.get(name, default)
    family = FAMILIES[pick("family", "uniform")]
    n, k, b = pick("n", None), pick("k", 4), pick("b", 3.0)
    alpha = args.alpha if args.alpha is not None or args.m is not None else preset.get("alpha")
    if n is None:
        raise UsageError("gen needs --n or a preset")
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    tag = ("sf" if family == "scale-free" else "uf") + str(n)
    base = dict(n=n, k=k, m=args.m, alpha=alpha, family=family, b=b, require_sat=args.require_sat)
    GeneratorSpec(seed=0, **base)  # validate before writing anything
    entries = []
    for i in range(args.count):
        seed_i = int(stream(args.seed, i, "instance").integers(0, 2**62))
        spec = GeneratorSpec(seed=seed_i, **base)
        text = write_dimacs(generate(spec), [f"rlnmc {__version__} {json.dumps(asdict(spec), sort_keys=True)}"])
        name = f"{tag}_{i:04d}.cnf"
        (out / name).write_text(text)
        entries.append({"file": name, "seed": seed_i, "sha256": hashlib.sha256(text.encode()).hexdigest()})
    manifest = {"version": RECORD_VERSION, "kind": "manifest", "rlnmc": __version__, "numpy": np.__version__,
                "master_seed": args.seed, "spec": base, "instances": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(out / "manifest.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


def _solve_chunk(job):
    model, name, cfg, replicas, params = job
    if cfg.algorithm == "sa":
        recs = run_sa(model, cfg.schedule(), cfg.criterion(), cfg.replicas, cfg.seed, cfg.rule,
                      instance=name, replicas=replicas)
        return recs, []
    policy = RLPolicy(params) if cfg.algorithm == "rlnmc" else None
    recs, stats = run_nmc(model, cfg.schedule(), cfg.criterion(), cfg.nmc(), policy, cfg.replicas, cfg.seed,
                          cfg.rule, instance=name, replicas=replicas)
    return recs, [dict(s.to_dict(), instance=name) for s in stats]


def _chunks(n: int, parts: int) -> list[list[int]]:
    parts = max(1, min(parts, n))
    return [list(range(n))[i::parts] for i in range(parts)]


def run_jobs(jobs, threads: int):
    if threads <= 1 or len(jobs) <= 1:
        return [_solve_chunk(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_solve_chunk, jobs))


def cmd_solve(args) -> int:
    cfg = resolve_experiment(args)
    if cfg.algorithm != "sa":
        cfg.nmc()
        budget_split(cfg.schedule(), cfg.nmc())  # fails early on an infeasible budget
    params = load_params(cfg.checkpoint) if cfg.algorithm == "rlnmc" else None
    paths = instance_paths(args.instances)
    jobs = []
    for p in paths:
        model = load_instance(p)
        jobs.extend((model, p.stem, cfg, chunk, params) for chunk in _chunks(cfg.replicas, args.threads))
    results = run_jobs(jobs, args.threads)
    records = sorted((r for recs, _ in results for r in recs), key=lambda r: (str(r.instance), r.replica))
    jumps = sorted((s for _, st in results for s in st), key=lambda s: (s["instance"], s["replica"], s["step"]))
    conf = asdict(cfg)
    conf["instances"] = [p.name for p in paths]
    fh, close = _open_out(args.out)
    try:
        fh.write(_json_line(header("solve", conf)))
        for r in records:
            fh.write(_json_line(r.to_dict()))
    finally:
        if close:
            fh.close()
    if args.jumps:
        with open(args.jumps, "w") as jf:
            jf.write(_json_line(header("solve", conf)))
            for s in jumps:
                jf.write(_json_line(s))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_FLAGS = {
    "train_reps": "n_train_reps", "replicas": "n_replicas", "n_eps": "n_eps", "epochs": "epochs",
    "minibatch": "minibatch", "n_steps": "n_nmc_steps", "steps_per_update": "steps_per_update",
    "n_sw": "n_sw", "lr_start": "lr_start", "lr_end": "lr_end", "sa_sweeps": "sa_sweeps",
    "beta_i": "beta_i", "beta_nmc": "beta_nmc", "beta_f": "beta_f", "threshold": "success_threshold",
}


def resolve_train_config(args):
    name = PRESETS[args.preset]["train"] if args.preset in PRESETS else args.preset
    if name not in TRAIN_PRESETS:
        raise UsageError(f"unknown training preset {args.preset!r}")
    overrides = {field: getattr(args, flag) for flag, field in TRAIN_FLAGS.items() if getattr(args, flag) is not None}
    return replace(TRAIN_PRESETS[name], **overrides)


def cmd_train(args) -> int:
    config = resolve_train_config(args)
    paths = instance_paths(args.instances)
    models = [load_instance(p) for p in paths]
    init = load_params(args.init) if args.init else None
    out = Path(args.out or "train_out")
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.ldj"
    with open(log_path, "w") as log:
        conf = asdict(config)
        conf.update(seed=args.seed, instances=[p.name for p in paths])
        log.write(_json_line(header("train", conf)))
        write = lambda rec: (log.write(_json_line({"version": RECORD_VERSION, "kind": "update", **rec})), log.flush())
        try:
            params, _ = train_rlnmc(models, config, seed=args.seed, init=init, log=write,
                                    checkpoint_dir=out, checkpoint_every=args.checkpoint_every)
        except TrainingError as exc:
            if exc.params is not None:
                save_params(exc.params, out / "policy_last_good.ckpt")
            print(f"training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
    final = out / "policy.ckpt"
    save_params(params, final)
    print(final)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def default_budgets(records: Sequence[RunRecord], count: int = 20) -> list[float]:
    top = max(r.total_mcs for r in records)
    return sorted({int(round(b)) for b in np.geomspace(max(1, top / 1000), top, count)})


def cmd_eval(args) -> int:
    records = read_records(args.records)
    groups = group_by_instance(records)
    instances = [groups[k] for k in sorted(groups, key=str)]
    budgets = args.budgets or default_budgets(records)
    metric = args.metric
    if metric == "pos":
        from .metrics import pos_at
        rows = [(k, b, pos_at(groups[k], b)) for k in sorted(groups, key=str) for b in budgets]
        _write_csv(args.out, ["instance", "budget", "pos"], rows)
    elif metric in ("tts", "residual"):
        rows = []
        for b in budgets:
            tau = tau_with_overhead(b, args.jumps, args.overhead_per_jump) if metric == "tts" else None
            mean, std = bootstrap_percentile(instances, metric, args.percentile, args.n_boot, args.seed,
                                             budget=b, tau=tau)
            rows.append((b, args.percentile, repr(mean), repr(std)))
        _write_csv(args.out, ["budget", "percentile", "mean", "std"], rows)
    elif metric == "tts_min":
        mean, std = bootstrap_percentile(instances, "tts_min", args.percentile, args.n_boot, args.seed,
                                         budgets=budgets)
        _write_csv(args.out, ["percentile", "mean", "std"], [(args.percentile, repr(mean), repr(std))])
    elif metric == "diversity":
        rows = []
        for k in sorted(groups, key=str):
            sols = [r.best_assignment for r in groups[k] if r.min_energy <= args.threshold]
            n = len(groups[k][0].best_assignment)
            res = diversity(np.array(sols, dtype=np.int8).reshape(len(sols), n))
            rows.extend((k, res.n_solutions, repr(float(rad)), int(d), repr(res.integral))
                        for rad, d in zip(res.radii, res.values))
        _write_csv(args.out, ["instance", "n_solutions", "radius", "D", "integral"], rows)
    else:
        raise UsageError(f"unknown metric {metric!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------


def cmd_trace(args) -> int:
    cfg = resolve_experiment(args)
    path = instance_paths(args.instances)[0]
    model = load_instance(path)
    tr = {args.replica: Trace()}
    if cfg.algorithm == "sa":
        run_sa(model, cfg.schedule(), cfg.criterion(), cfg.replicas, cfg.seed, cfg.rule,
               instance=path.stem, replicas=[args.replica], traces=tr)
    else:
        params = load_params(cfg.checkpoint) if cfg.algorithm == "rlnmc" else None
        policy = RLPolicy(params) if params is not None else None
        run_nmc(model, cfg.schedule(), cfg.criterion(), cfg.nmc(), policy, cfg.replicas, cfg.seed, cfg.rule,
                instance=path.stem, replicas=[args.replica], traces=tr)
    t = tr[args.replica]
    out = Path(args.out or "trace_out")
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(str(out / "trace.csv"), ["sweep", "energy"], ((s, _energy(e)) for s, e in zip(t.sweeps.tolist(), t.energies.tolist())))
    diag = trajectory_diagnostics(t.sweeps, t.energies, t.assignments, args.window)
    _write_csv(str(out / "diagnostics.csv"), ["window", "basin_energy", "distance_to_best"],
               ((i, _energy(e), repr(float(d))) for i, (e, d) in enumerate(zip(diag.basin_energy.tolist(),
                                                                                 diag.distance_to_best))))
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file; keys from [common] and the subcommand's section")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--threads", type=int, default=1, help="worker processes (default 1)")
    p.add_argument("--out", help="output path")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("instances", nargs="*", help="DIMACS .cnf / .poly files or directories")
    p.add_argument("--algorithm", choices=("sa", "nmc", "rlnmc"), default="sa")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--checkpoint", help="policy checkpoint for rlnmc")
    p.add_argument("--rule", choices=RULES, default="metropolis")
    for name, typ in (("beta_i", float), ("beta_f", float), ("beta_nmc", float), ("sweeps", int), ("r", float),
                      ("n_cycles", int), ("n_sw", int), ("n_steps", int), ("threshold", float),
                      ("replicas", int)):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ,
                       help=f"default {SOLVE_DEFAULTS[name]} or the preset's value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlnmc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"rlnmc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate random k-SAT instances")
    _add_common(g)
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--family", choices=sorted(FAMILIES))
    g.add_argument("--n", type=int)
    g.add_argument("--k", type=int)
    g.add_argument("--alpha", type=float)
    g.add_argument("--m", type=int)
    g.add_argument("--b", type=float)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--require-sat", action="store_true")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="run SA, NMC or RLNMC and stream run records")
    _add_common(s)
    _add_run_flags(s)
    s.add_argument("--jumps", help="also write per-jump statistics to this LDJ file")
    s.set_defaults(func=cmd_solve)

    t = sub.add_parser("train", help="train a backbone policy with PPO")
    _add_common(t)
    t.add_argument("instances", nargs="*", help="training instances")
    t.add_argument("--preset", default="desk", help="training preset: " + ", ".join(sorted(TRAIN_PRESETS)) +
                   ", or a solve preset name")
    t.add_argument("--init", help="start from this checkpoint")
    t.add_argument("--checkpoint-every", type=int, default=0)
    for flag, field in TRAIN_FLAGS.items():
        typ = next(f.type for f in fields(TRAIN_PRESETS["desk"]) if f.name == field)
        t.add_argument("--" + flag.replace("_", "-"), dest=flag, type={"int": int, "float": float}[typ])
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="tables from run records")
    _add_common(e)
    e.add_argument("records", nargs="*", help="LDJ record files")
    e.add_argument("--metric", choices=("pos", "tts", "tts_min", "residual", "diversity"), default="tts")
    e.add_argument("--budgets", type=_floats, help="sweep budgets, comma separated")
    e.add_argument("--percentile", type=float, default=0.5)
    e.add_argument("--n-boot", type=int, default=1000)
    e.add_argument("--threshold", type=float, default=0.0, help="energy counted as a solution (diversity)")
    e.add_argument("--jumps", type=int, default=0, help="jumps per run, for the overhead-adjusted TTS")
    e.add_argument("--overhead-per-jump", type=float, default=0.0, help="extra sweeps charged per jump")
    e.set_defaults(func=cmd_eval)

    tr = sub.add_parser("trace", help="energy trace and basin diagnostics of one replica")
    _add_common(tr)
    _add_run_flags(tr)
    tr.add_argument("--replica", type=int, default=0)
    tr.add_argument("--window", type=int, default=300)
    tr.set_defaults(func=cmd_trace)
    return parser


def _config_defaults(sub: argparse.ArgumentParser, path: str, command: str) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(f"cannot read config file {path}")
    items = dict(cp.items("common")) if cp.has_section("common") else {}
    if cp.has_section(command):
        items.update(cp.items(command))
    actions = {a.dest: a for a in sub._actions}
    out = {}
    for key, raw in items.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("config", "help"):
            raise UsageError(f"unknown key {key!r} in [{command}] of {path}")
        a = actions[dest]
        if isinstance(a, argparse._StoreTrueAction):
            out[dest] = cp.BOOLEAN_STATES.get(raw.lower())
            if out[dest] is None:
                raise UsageError(f"{key} must be a boolean, got {raw!r}")
        elif a.nargs == "*":
            out[dest] = raw.split()
        else:
            out[dest] = a.type(raw) if a.type else raw
            if a.choices is not None and out[dest] not in a.choices:
                raise UsageError(f"{key}: {raw!r} is not one of {sorted(a.choices)}")
    return out


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**_config_defaults(sub, args.config, args.command))
        args = parser.parse_args(argv)
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"rlnmc: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DimacsError, CheckpointError, MetricsError, GenerationError, NmcConfigError, ValueError) as exc:
        print(f"rlnmc: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"rlnmc: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
