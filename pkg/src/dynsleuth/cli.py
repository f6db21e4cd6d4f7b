"""Command-line driver: ``dynsleuth <command> ...``.

Every command accepts ``--config FILE`` with ``key=value`` lines whose keys
are the long option names (dashes or underscores). Explicit flags beat file
values, which beat built-in defaults. Each run writes a manifest next to its
primary output once all artifacts have been written and re-read.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .baseline_attacks import RlSearchConfig, random_search, rl_search
from .env_families import (
    CandidateSet,
    GridEnv,
    builtin_candidate_set,
    load_candidate_set,
    save_candidate_set,
)
from .ga_attack import BlackBoxPolicy, FitnessConfig, GaConfig, MapSpace, ga_search, recovery_rate
from .gridworld import GridMap, load_map, random_map, render_map
from .neuralnet import Head, MlpPolicy, load_policy, policy_to_bytes
from .shadow_inference import (
    SCHEMA_VERSION,
    SvmConfig,
    accuracy_summary,
    build_feature_table,
    check_split_hygiene,
    default_trainer,
    extract_features,
    fit_classifier,
    infer_candidate,
    load_features,
    load_model,
    run_inference_experiment,
    save_features,
    save_model,
    train_shadow_policies,
)
from .trainers import DqnConfig, GaussianPgConfig, PgConfig, train_dqn, train_gaussian_pg, train_pg

log = logging.getLogger("dynsleuth")

TABLE_COLUMNS = ("Environment", "Agent", "Task", "Method", "Recovery Rate", "Run Time")
METHOD_NAMES = {"ga": "Genetic Algorithm", "random": "Random Search", "rl": "RL Search"}
AGENT_NAMES = {"dqn": "DQN", "pg": "PG", "gpg": "Gaussian PG"}
FAMILY_NAMES = {"pointbot": "PointBot", "slipgrid": "SlipGrid"}


class UsageError(Exception):
    """Bad arguments or missing inputs; exit code 2."""


# ---------------------------------------------------------------------------
# options, config files, seeds


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _size(text) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in str(text).lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"size must look like 7x7, got {text!r}") from exc
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def _cell(text) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in str(text).split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"cell must look like row,col, got {text!r}") from exc
    return r, c


def _int_list(text) -> list[int]:
    text = str(text)
    if "-" in text and "," not in text:
        lo, hi = (int(v) for v in text.split("-"))
        return list(range(lo, hi + 1))
    return [int(v) for v in text.split(",") if v.strip()]


class Options:
    """Registers flags whose defaults are applied after config-file merging."""

    def __init__(self, parser: argparse.ArgumentParser):
        self.parser = parser
        self.spec: dict[str, tuple] = {}
        parser.add_argument("--config", help="key=value file; flags override its values")

    def add(self, flag, type=str, default=None, help=None, choices=None, required=False):
        dest = flag.lstrip("-").replace("-", "_")
        kw = {"dest": dest, "default": None, "help": help}
        if type is _bool:
            self.parser.add_argument(flag, action="store_const", const=True, **kw)
            self.parser.add_argument("--no-" + flag.lstrip("-"), action="store_const", const=False, dest=dest)
        else:
            self.parser.add_argument(flag, type=type, choices=choices, **kw)
        self.spec[dest] = (type, default, required, choices)


def read_config(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve(args, spec: dict[str, tuple]) -> None:
    file_vals = read_config(args.config) if getattr(args, "config", None) else {}
    unknown = sorted(set(file_vals) - set(spec))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    for dest, (typ, default, required, choices) in spec.items():
        value = getattr(args, dest)
        if value is None and dest in file_vals:
            try:
                value = typ(file_vals[dest])
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config value for {dest}: {exc}") from exc
            if choices is not None and value not in choices:
                raise UsageError(f"config value for {dest} must be one of {choices}")
        if value is None:
            value = default
        if value is None and required:
            raise UsageError(f"--{dest.replace('_', '-')} is required")
        setattr(args, dest, value)


def substream(seed: int, name: str) -> int:
    """Named child seed; independent of the order streams are requested in."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def default_jobs() -> int:
    env = os.environ.get("DYNSLEUTH_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UsageError(f"DYNSLEUTH_JOBS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# artifacts and manifests


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


class Run:
    def __init__(self, command: str, argv: list[str], args):
        self.command = command
        self.argv = argv
        self.config = {k: v for k, v in vars(args).items() if k not in ("func", "config_spec")}
        self.seeds: dict[str, int] = {}
        self.artifacts: list[str] = []
        self.started = datetime.now(timezone.utc).isoformat()

    def add(self, path) -> None:
        self.artifacts.append(str(path))

    def write_manifest(self, path) -> None:
        missing = [a for a in self.artifacts if not os.path.exists(a)]
        if missing:
            raise RuntimeError(f"artifacts missing before manifest: {missing}")
        write_json(path, {
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "argv": self.argv,
            "config": _jsonable(self.config),
            "seeds": self.seeds,
            "artifacts": self.artifacts,
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "version": __version__,
        })


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _manifest_path(out) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _save_policy_checked(policy: MlpPolicy, path) -> None:
    data = policy_to_bytes(policy)
    atomic_write(path, data)
    if Path(path).read_bytes() != data:
        raise RuntimeError(f"{path}: re-read does not match")


def _load_candidates(spec: str) -> CandidateSet:
    if os.path.exists(spec):
        return load_candidate_set(spec)
    try:
        return builtin_candidate_set(spec)
    except ValueError as exc:
        raise UsageError(f"{spec!r} is neither a candidate file nor a built-in set") from exc


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"missing {what}: {p}")
    return p


# ---------------------------------------------------------------------------
# gen-maps


def cmd_gen_maps(args, run: Run) -> Path:
    h, w = args.size
    gr, gc = args.goal if args.goal is not None else (0, w - 1)
    if not (0 <= gr < h and 0 <= gc < w):
        raise UsageError(f"goal {gr},{gc} outside a {h}x{w} grid")
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.seeds["maps"] = substream(args.seed, "maps")
    rng = np.random.default_rng(run.seeds["maps"])
    width = max(2, len(str(max(args.count - 1, 0))))
    for i in range(args.count):
        m = random_map(w, h, gr * w + gc, args.density, rng)
        path = out / f"map_{i:0{width}d}.map"
        atomic_write(path, render_map(m) + "\n")
        if load_map(path) != m:
            raise RuntimeError(f"{path}: re-read does not match")
        run.add(path)
    return out


# ---------------------------------------------------------------------------
# train

ALGOS_BY_ENV = {"grid": ("dqn", "pg"), "slipgrid": ("dqn", "pg"), "pointbot": ("gpg",)}


def _make_train_env(args):
    if args.env == "grid":
        if not args.map:
            raise UsageError("--env grid needs --map")
        m = load_map(_require_file(args.map, "map file"))
        return m, GridEnv(m)
    if not (args.candidates and args.label):
        raise UsageError(f"--env {args.env} needs --candidates and --label")
    cs = _load_candidates(args.candidates)
    if cs.family != args.env:
        raise UsageError(f"candidate set family {cs.family!r} does not match --env {args.env}")
    if args.label not in cs.labels:
        raise UsageError(f"label {args.label!r} not in {cs.labels}")
    return None, cs[cs.labels.index(args.label)].make_env()


def cmd_train(args, run: Run) -> Path:
    if args.algo not in ALGOS_BY_ENV[args.env]:
        raise UsageError(f"--algo {args.algo} cannot train on --env {args.env}")
    _, env = _make_train_env(args)
    seed = substream(args.seed, "train")
    run.seeds["train"] = seed
    out = Path(args.out)
    log_lines = []

    def progress(step, a, b):
        log_lines.append(f"{step}\t{a:.6g}\t{b:.6g}")

    if args.algo == "dqn":
        over = {}
        if args.steps:
            over = {"total_steps": args.steps,
                    "eps_decay_end_step": min(args.steps, DqnConfig.eps_decay_end_step)}
        cfg = DqnConfig(**over)
        header = "step\tepsilon\tgoal_rate"
        policy = train_dqn(env, cfg, seed, progress)
    elif args.algo == "pg":
        cfg = PgConfig(**({"total_episodes": args.episodes} if args.episodes else {}))
        header = "episodes\tmean_return\tgoal_rate"
        policy = train_pg(env, cfg, seed, progress)
    else:
        cfg = GaussianPgConfig(**({"total_episodes": args.episodes} if args.episodes else {}))
        header = "episodes\tmean_return\tlog_std"
        policy = train_gaussian_pg(env, cfg, seed, progress)
    policy.meta.update({"env": args.env, "config": _jsonable(asdict(cfg))})
    if args.label:
        policy.meta["candidate"] = args.label
    _save_policy_checked(policy, out)
    run.add(out)
    log_path = out.with_name(out.name + ".log")
    atomic_write(log_path, "\n".join([header] + log_lines) + "\n")
    run.add(log_path)
    return out


# ---------------------------------------------------------------------------
# attack


def _attack_one(job):
    method, policy, kind, fitness_cfg, space, truth, seed, params = job
    target = BlackBoxPolicy(policy)
    if method == "ga":
        res = ga_search(target, GaConfig(**{**params["ga"], "seed": seed}), fitness_cfg, space, truth)
    elif method == "random":
        res = random_search(target, fitness_cfg, space, max_evaluations=params["budget"],
                            max_seconds=params["max_seconds"], seed=seed, truth=truth)
    else:
        cfg = RlSearchConfig(**{**params["rl"], "seed": seed})
        res = rl_search(target, fitness_cfg, space, cfg, max_evaluations=params["budget"], truth=truth)
    return seed, res


def _map_rows(m: GridMap) -> list[str]:
    return render_map(m).split("\n")


def cmd_attack(args, run: Run) -> Path:
    policy = load_policy(_require_file(args.policy, "policy file"))
    expected = {"dqn": Head.Q_VALUES, "pg": Head.LOGITS}[args.agent_kind]
    if policy.head is not expected:
        raise UsageError(f"policy head is {policy.head.value!r}, --agent-kind {args.agent_kind} needs {expected.value!r}")
    truth = load_map(_require_file(args.truth, "truth map")) if args.truth else None
    if truth is not None:
        space = MapSpace.of(truth)
    else:
        if args.size is None or args.goal is None:
            raise UsageError("without --truth, give --size and --goal")
        h, w = args.size
        space = MapSpace(w, h, args.goal[0] * w + args.goal[1])
    fit_cfg = FitnessConfig.for_agent(
        args.agent_kind, epsilon=args.epsilon, temperature=args.temperature,
        normalize=args.normalize, tie_aware=args.tie_aware,
    )
    seeds = [substream(args.seed, f"{args.method}:{s}") for s in args.seeds]
    run.seeds.update({f"{args.method}:{s}": v for s, v in zip(args.seeds, seeds)})
    params = {
        "ga": asdict(GaConfig(args.population, args.elite, args.generations, args.mutation_rate)),
        "budget": args.budget,
        "max_seconds": args.max_seconds,
        "rl": asdict(RlSearchConfig(**({"total_steps": args.rl_steps,
                                        "eps_decay_end_step": int(args.rl_steps * 0.96)}
                                       if args.rl_steps else {}))),
    }
    if args.method == "random" and args.budget is None and args.max_seconds is None:
        params["budget"] = 20_000
    jobs = [(args.method, policy, args.agent_kind, fit_cfg, space, truth, s, params) for s in seeds]
    t0 = time.perf_counter()
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(args.jobs, len(jobs))) as pool:
            results = list(pool.map(_attack_one, jobs))
    else:
        results = [_attack_one(j) for j in jobs]
    wall = time.perf_counter() - t0

    per_seed = []
    for label, (seed, res) in zip(args.seeds, results):
        entry = {
            "seed_index": label,
            "seed": seed,
            "best_score": res.best_score,
            "evaluations": res.evaluations,
            "seconds": res.seconds,
            "map": _map_rows(res.best_map),
            "history": res.history.to_json() if res.history else None,
        }
        if truth is not None:
            entry["recovery_rate"] = recovery_rate(res.best_map, truth)
        per_seed.append(entry)
    best = max(per_seed, key=lambda e: e["best_score"])  # first seed wins ties
    report = {
        "schema_version": SCHEMA_VERSION,
        "kind": "attack",
        "method": args.method,
        "agent_kind": args.agent_kind,
        "environment": "Grid World",
        "policy": str(args.policy),
        "truth": _map_rows(truth) if truth is not None else None,
        "fitness_config": _jsonable(asdict(fit_cfg)),
        "config": _jsonable(params),
        "per_seed": per_seed,
        "best": {k: best[k] for k in ("seed_index", "best_score", "map") + (("recovery_rate",) if truth else ())},
        "evaluations_total": int(sum(e["evaluations"] for e in per_seed)),
        "wall_clock_seconds": wall,
    }
    out = Path(args.out)
    write_json(out, report)
    json.loads(out.read_text())
    run.add(out)
    return out


# ---------------------------------------------------------------------------
# shadow


def _shadow_policy_path(directory: Path, label: str, j: int) -> Path:
    return directory / f"{label}__{j:03d}.policy"


def _shadow_trainer(cs: CandidateSet, args):
    algo, tcfg = default_trainer(cs.family)
    if args.episodes:
        tcfg = replace(tcfg, total_episodes=args.episodes)
    return algo, tcfg


def cmd_shadow_train(args, run: Run) -> Path:
    cs = _load_candidates(args.candidates)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.seeds["shadow"] = substream(args.seed, "shadow")
    policies = train_shadow_policies(cs, args.m, _shadow_trainer(cs, args), run.seeds["shadow"], args.jobs)
    save_candidate_set(cs, out / "candidates.json")
    run.add(out / "candidates.json")
    for i, row in enumerate(policies):
        for j, pol in enumerate(row):
            path = _shadow_policy_path(out, cs.labels[i], j)
            _save_policy_checked(pol, path)
            run.add(path)
    return out


def _read_shadow_dir(directory: Path, cs: CandidateSet, m: int | None):
    policies = []
    for label in cs.labels:
        row = []
        j = 0
        while True:
            path = _shadow_policy_path(directory, label, j)
            if not path.exists():
                break
            row.append(load_policy(path))
            j += 1
            if m is not None and j >= m:
                break
        if not row:
            raise UsageError(f"missing shadow policies for {label!r}: expected {_shadow_policy_path(directory, label, 0)}")
        if m is not None and len(row) < m:
            raise UsageError(f"missing shadow policy {_shadow_policy_path(directory, label, len(row))}")
        policies.append(row)
    return policies


def cmd_shadow_features(args, run: Run) -> Path:
    directory = Path(args.policies)
    if not directory.is_dir():
        raise UsageError(f"missing shadow policy directory: {directory}")
    cs = _load_candidates(args.candidates)
    policies = _read_shadow_dir(directory, cs, args.m)
    run.seeds["features"] = substream(args.seed, "features")
    table = build_feature_table(cs, policies, args.train_seeds, args.k, run.seeds["features"], args.jobs)
    out = Path(args.out)
    save_features(table, out)
    load_features(out, cs.labels)
    run.add(out)
    return out


def _svm_cfg(args) -> SvmConfig:
    return SvmConfig(C=args.C, epochs=args.epochs, lr=args.lr, seed=substream(args.seed, "svm"),
                     batch_size=args.batch_size or None, standardize=not args.raw)


def cmd_shadow_fit(args, run: Run) -> Path:
    cs = _load_candidates(args.candidates)
    table = load_features(_require_file(args.features, "feature table"), cs.labels)
    Xtr, ytr = table.split("train")
    model = fit_classifier(Xtr, ytr, len(cs), _svm_cfg(args), cs.labels)
    train_seed_count = int(table.rows_seed[[s == "train" for s in table.rows_split]].max()) + 1
    check_split_hygiene(table, model, train_seed_count)
    out = Path(args.out)
    save_model(model, out)
    load_model(out)
    run.add(out)
    Xte, yte = table.split("test")
    if len(yte):
        summary = accuracy_summary(yte, model.predict(Xte), len(cs))
        print(f"held-out macro accuracy: {summary['macro_accuracy']:.4f}")
    return out


def cmd_shadow_infer(args, run: Run) -> Path | None:
    model = load_model(_require_file(args.model, "model file"))
    policy = load_policy(_require_file(args.policy, "policy file"))
    cs = _load_candidates(args.candidates)
    if cs.labels != model.labels:
        raise UsageError("candidate set order differs from the model's labels")
    run.seeds["infer"] = substream(args.seed, "infer")
    feature = extract_features(policy, cs, args.k, run.seeds["infer"])
    idx, scores = infer_candidate(model, feature)
    print(cs.labels[idx])
    if args.out:
        out = Path(args.out)
        write_json(out, {"schema_version": SCHEMA_VERSION, "kind": "inference_single",
                         "label": cs.labels[idx], "index": idx, "scores": scores.tolist(),
                         "feature": feature.tolist()})
        run.add(out)
        return out
    return None


def cmd_shadow_experiment(args, run: Run) -> Path:
    cs = _load_candidates(args.candidates)
    run.seeds["experiment"] = substream(args.seed, "experiment")
    algo, tcfg = _shadow_trainer(cs, args)
    report, table, model = run_inference_experiment(
        cs, args.m, args.train_seeds, args.k, (algo, tcfg), _svm_cfg(args), run.seeds["experiment"], args.jobs,
    )
    report["agent"] = algo
    out = Path(args.out)
    write_json(out, _jsonable(report))
    run.add(out)
    feat = out.with_name(out.stem + ".features.csv")
    save_features(table, feat)
    run.add(feat)
    model_path = out.with_name(out.stem + ".svm.json")
    save_model(model, model_path)
    run.add(model_path)
    print(f"macro accuracy: {report['macro_accuracy']:.4f}")
    return out


# ---------------------------------------------------------------------------
# report


def _report_row(rep: dict) -> tuple[tuple[str, str, str, str], float, float]:
    if rep.get("schema_version") != SCHEMA_VERSION:
        raise UsageError(f"schema_version {rep.get('schema_version')!r} != {SCHEMA_VERSION}")
    if rep.get("kind") == "attack":
        if not rep.get("truth"):
            raise UsageError("attack report without a truth map has no recovery rate")
        key = (rep["environment"], AGENT_NAMES[rep["agent_kind"]], "Map recovery", METHOD_NAMES[rep["method"]])
        return key, float(rep["best"]["recovery_rate"]), float(rep["wall_clock_seconds"])
    if rep.get("kind") == "inference":
        key = (FAMILY_NAMES.get(rep["family"], rep["family"]), AGENT_NAMES.get(rep.get("agent", ""), rep.get("agent", "?")),
               "Candidate inference", "Shadow policies + SVM")
        return key, float(rep["macro_accuracy"]), float(rep["seconds"]["total"])
    raise UsageError(f"unknown report kind {rep.get('kind')!r}")


def summarize_reports(reports: list[dict]) -> str:
    if not reports:
        raise UsageError("no input reports")
    groups: dict[tuple, list[tuple[float, float]]] = {}
    for rep in reports:
        key, rate, secs = _report_row(rep)
        groups.setdefault(key, []).append((rate, secs))
    lines = ["| " + " | ".join(TABLE_COLUMNS) + " |", "|" + "---|" * len(TABLE_COLUMNS)]
    for key, vals in groups.items():
        rate = np.mean([v[0] for v in vals])
        secs = np.mean([v[1] for v in vals])
        lines.append("| " + " | ".join(key) + f" | {100 * rate:.2f}% | {secs:.1f} s |")
    return "\n".join(lines) + "\n"


def cmd_report(args, run: Run) -> Path:
    reports = []
    for p in args.inputs or []:
        with open(_require_file(p, "report")) as fh:
            reports.append(json.load(fh))
    table = summarize_reports(reports)
    out = Path(args.out)
    atomic_write(out, table)
    run.add(out)
    print(table, end="")
    return out


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynsleuth", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: $DYNSLEUTH_JOBS or CPU count)")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, func, help, parent=sub):
        sp = parent.add_parser(name, help=help)
        opts = Options(sp)
        sp.set_defaults(func=func, config_spec=opts.spec)
        return opts

    o = command("gen-maps", cmd_gen_maps, "write random constraint-valid maps")
    o.add("--count", int, 20)
    o.add("--size", _size, (7, 7), "HxW")
    o.add("--goal", _cell, None, "row,col (default: top-right)")
    o.add("--density", float, 0.3)
    o.add("--seed", int, 0)
    o.add("--out", str, required=True)

    o = command("train", cmd_train, "train a DQN / PG / Gaussian-PG policy")
    o.add("--env", str, "grid", choices=("grid", "slipgrid", "pointbot"))
    o.add("--algo", str, required=True, choices=("dqn", "pg", "gpg"))
    o.add("--map", str)
    o.add("--candidates", str, help="built-in set name or .candidates.json")
    o.add("--label", str, help="candidate label within the set")
    o.add("--steps", int, None, "DQN step budget")
    o.add("--episodes", int, None, "PG episode budget")
    o.add("--seed", int, 0)
    o.add("--out", str, required=True)

    o = command("attack", cmd_attack, "recover a floor plan from a policy")
    o.add("--method", str, "ga", choices=("ga", "random", "rl"))
    o.add("--policy", str, required=True)
    o.add("--agent-kind", str, required=True, choices=("dqn", "pg"))
    o.add("--truth", str)
    o.add("--size", _size)
    o.add("--goal", _cell)
    o.add("--seeds", _int_list, list(range(8)), "e.g. 0-7 or 0,3,5")
    o.add("--seed", int, 0, "root seed the per-run seeds derive from")
    o.add("--population", int, 64)
    o.add("--elite", int, 8)
    o.add("--generations", int, 150)
    o.add("--mutation-rate", float, 0.05)
    o.add("--budget", int, None, "fitness evaluations per seed (random/rl)")
    o.add("--max-seconds", float, None, "wall-clock budget per seed (random)")
    o.add("--rl-steps", int, None)
    o.add("--epsilon", float, 0.02)
    o.add("--temperature", float, 0.01)
    o.add("--normalize", _bool, False)
    o.add("--tie-aware", _bool, True)
    o.add("--out", str, required=True)

    shadow = sub.add_parser("shadow", help="candidate inference with shadow policies")
    ssub = shadow.add_subparsers(dest="shadow_command", required=True)

    def svm_opts(o):
        o.add("--C", float, 1.0)
        o.add("--epochs", int, 200)
        o.add("--lr", float, 0.1)
        o.add("--batch-size", int, 16, "0 for full-batch")
        o.add("--raw", _bool, False, "skip feature standardization")

    o = command("train", cmd_shadow_train, "train N x m shadow policies", ssub)
    o.add("--candidates", str, required=True)
    o.add("--m", int, 32)
    o.add("--episodes", int, None, "override the shadow trainer's episode budget")
    o.add("--seed", int, 0)
    o.add("--out", str, required=True)

    o = command("features", cmd_shadow_features, "reward-statistic features", ssub)
    o.add("--candidates", str, required=True)
    o.add("--policies", str, required=True)
    o.add("--m", int, None)
    o.add("--train-seeds", int, 8)
    o.add("--k", int, 20)
    o.add("--seed", int, 0)
    o.add("--out", str, required=True)

    o = command("fit", cmd_shadow_fit, "fit the linear SVM on the train split", ssub)
    o.add("--candidates", str, required=True)
    o.add("--features", str, required=True)
    o.add("--seed", int, 0)
    svm_opts(o)
    o.add("--out", str, required=True)

    o = command("infer", cmd_shadow_infer, "classify one policy", ssub)
    o.add("--candidates", str, required=True)
    o.add("--model", str, required=True)
    o.add("--policy", str, required=True)
    o.add("--k", int, 20)
    o.add("--seed", int, 0)
    o.add("--out", str)

    o = command("experiment", cmd_shadow_experiment, "end-to-end inference experiment", ssub)
    o.add("--candidates", str, required=True)
    o.add("--m", int, 32)
    o.add("--train-seeds", int, 8)
    o.add("--k", int, 20)
    o.add("--episodes", int, None, "override the shadow trainer's episode budget")
    o.add("--seed", int, 0)
    svm_opts(o)
    o.add("--out", str, required=True)

    o = command("report", cmd_report, "markdown summary table over reports")
    p_report = o.parser
    p_report.add_argument("--inputs", nargs="*", default=None)
    o.add("--out", str, required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs is None:
            args.jobs = default_jobs()
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        resolve(args, args.config_spec)
        name = args.command + (f" {args.shadow_command}" if args.command == "shadow" else "")
        run = Run(name, argv, args)
        out = args.func(args, run)
        if out is not None:
            run.write_manifest(_manifest_path(out))
    except UsageError as exc:
        print(f"dynsleuth: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # keep the traceback for --log-level DEBUG
        log.debug("failure", exc_info=True)
        print(f"dynsleuth: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
