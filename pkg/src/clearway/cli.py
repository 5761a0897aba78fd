"""Command-line interface.

Subcommands:

* ``train``     -- fit the decentralized controller on a scenario, write a
                   checkpoint plus its learning curve.
* ``eval``      -- replay one sampled episode from a checkpoint, dumping the
                   route trace, event log, and episode metrics.
* ``benchmark`` -- run a named controller combo over several seeds and
                   aggregate the results.
* ``ablate``    -- retrain with one component removed and report the effect.
* ``report``    -- scan an output tree and render report.md + plotdata/.

Runs refuse to write into a non-empty directory unless ``--force`` is given.
Seed sweeps honor the ``CLEARWAY_WORKERS`` environment variable; the default
of 1 keeps everything in-process and deterministic output ordering is
preserved either way.  All CSV output is UTF-8 with a header row, floats are
written with 6 significant digits, and missing values appear as ``NA``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import COMBOS, build_benchmark
from .env import TrafficEnv, run_episode
from .ma2c import CurveRow, PolicyController, load_checkpoint, save_checkpoint, train
from .scenario import Scenario, ScenarioError, resolve_scenario

ABLATIONS = ("full", "presslight_reward", "no_primary", "no_secondary", "no_fingerprint")

METRICS_HEADER = ("episode", "seed", "T_EMV_s", "T_avg_s", "emergency_lanes_formed", "completed_trips")
CURVE_HEADER = ("episode", "seed", "T_EMV_s", "T_avg_s", "mean_reward")
ROUTE_HEADER = ("step", "emv_link", "eta_s", "next_id")
EVENTS_HEADER = ("time_s", "event_type", "vehicle_id", "lane_id")


def _fmt(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, float):
        if not np.isfinite(value):
            return "NA"
        return f"{value:.6g}"
    return str(value)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _prepare_out(out: str, force: bool) -> Path:
    path = Path(out)
    if path.exists() and any(path.iterdir()) and not force:
        raise SystemExit(f"error: output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _tool_version() -> str:
    root = Path(__file__).resolve().parent
    try:
        described = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=root,
            capture_output=True,
            text=True,
            timeout=10,
        )
        if described.returncode == 0 and described.stdout.strip():
            return described.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"clearway-{__version__}"


def _write_manifest(out: Path, command: str, scenario: Scenario, seeds, parameters: dict, outputs) -> None:
    manifest = {
        "tool": "clearway",
        "version": _tool_version(),
        "command": command,
        "scenario": {"name": scenario.name, "sha256": scenario.content_hash()},
        "seeds": list(seeds),
        "parameters": parameters,
        "outputs": sorted(outputs),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _censored(t_emv_s: float | None, scenario: Scenario) -> float | None:
    """Lower-bound travel time when the vehicle is still en route at horizon."""
    if t_emv_s is not None:
        return t_emv_s
    if not np.isfinite(scenario.emv.dispatch_s):
        return None
    return scenario.sim.horizon_s - scenario.emv.dispatch_s


def _write_curve(path: Path, curve: list[CurveRow], scenario: Scenario) -> None:
    rows = [
        (c.episode, c.seed, _censored(c.t_emv_s, scenario), c.t_avg_s, c.mean_reward)
        for c in curve
    ]
    _write_csv(path, CURVE_HEADER, rows)


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    mean = float(np.mean(vals))
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return mean, std


def _workers() -> int:
    raw = os.environ.get("CLEARWAY_WORKERS", "1").strip()
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _map_tasks(fn, tasks: list[tuple]) -> list:
    workers = _workers()
    if workers <= 1 or len(tasks) <= 1:
        return [fn(*task) for task in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        futures = [pool.submit(fn, *task) for task in tasks]
        return [f.result() for f in futures]


def _ablation_kwargs(which: str) -> dict:
    table = {
        "full": {},
        "presslight_reward": {"presslight": True},
        "no_primary": {"no_primary": True},
        "no_secondary": {"no_secondary": True},
        "no_fingerprint": {"fingerprint": False},
    }
    return table[which]


# -- train --------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    scenario = resolve_scenario(args.scenario)
    net = scenario.build_network()
    episodes = args.epochs if args.epochs is not None else scenario.train.episodes
    out = _prepare_out(args.out, args.force)

    result = train(scenario, net, args.seed, episodes, **_ablation_kwargs(args.ablation))

    save_checkpoint(out / "checkpoint.npz", result, scenario)
    _write_curve(out / "learning_curve.csv", result.curve, scenario)
    _write_manifest(
        out,
        "train",
        scenario,
        [args.seed],
        {"epochs": episodes, "ablation": args.ablation},
        ["checkpoint.npz", "learning_curve.csv"],
    )
    last = result.curve[-1]
    print(
        f"trained {scenario.name}: {episodes} episodes, {result.updates} updates, "
        f"final mean reward {_fmt(last.mean_reward)}"
    )
    return 0


# -- eval ----------------------------------------------------------------------


def cmd_eval(args: argparse.Namespace) -> int:
    scenario = resolve_scenario(args.scenario)
    net = scenario.build_network()
    ma2c, _meta = load_checkpoint(args.checkpoint, scenario, net)
    out = _prepare_out(args.out, args.force)

    rng = np.random.default_rng(args.seed)
    env = TrafficEnv(scenario, net, rng, router="relaxation", record_events=True, record_route=True)
    policy = PolicyController(ma2c, rng=np.random.default_rng(args.seed + 100_000))
    metrics = run_episode(env, policy)

    _write_csv(
        out / "metrics.csv",
        METRICS_HEADER,
        [(
            0,
            args.seed,
            _censored(metrics.t_emv_s, scenario),
            metrics.t_avg_s,
            metrics.emergency_lanes_formed,
            metrics.completed_trips,
        )],
    )
    _write_csv(out / "route.csv", ROUTE_HEADER, env.route_rows)
    _write_csv(out / "events.csv", EVENTS_HEADER, env.sim.events)
    _write_manifest(
        out,
        "eval",
        scenario,
        [args.seed],
        {"checkpoint": str(args.checkpoint)},
        ["metrics.csv", "route.csv", "events.csv"],
    )
    print(
        f"evaluated {scenario.name}: T_EMV={_fmt(_censored(metrics.t_emv_s, scenario))}s "
        f"T_avg={_fmt(metrics.t_avg_s)}s lanes_formed={metrics.emergency_lanes_formed}"
    )
    return 0


# -- benchmark -------------------------------------------------------------------


def _benchmark_one(scenario: Scenario, combo: str, seed: int, checkpoint: str | None):
    net = scenario.build_network()
    rng = np.random.default_rng(seed)
    policy = None
    if combo == "rl":
        ma2c, _ = load_checkpoint(checkpoint, scenario, net)
        # sample from a separate stream so arrivals match the other combos
        policy = PolicyController(ma2c, rng=np.random.default_rng(seed + 100_000))
    env, controller = build_benchmark(combo, scenario, net, rng, policy_controller=policy)
    return run_episode(env, controller)


def cmd_benchmark(args: argparse.Namespace) -> int:
    scenario = resolve_scenario(args.scenario)
    if args.combo == "rl" and args.checkpoint is None:
        raise SystemExit("error: combo 'rl' needs --checkpoint")
    out = _prepare_out(args.out, args.force)
    seeds = list(range(args.seed, args.seed + args.seeds))

    results = _map_tasks(_benchmark_one, [(scenario, args.combo, s, args.checkpoint) for s in seeds])

    emv_disabled = args.combo == "ft_no_emv"
    rows = []
    t_emvs: list[float | None] = []
    t_avgs: list[float | None] = []
    for seed, m in zip(seeds, results):
        t_emv = None if emv_disabled else _censored(m.t_emv_s, scenario)
        rows.append((0, seed, t_emv, m.t_avg_s, m.emergency_lanes_formed, m.completed_trips))
        t_emvs.append(t_emv)
        t_avgs.append(m.t_avg_s)
    _write_csv(out / "metrics.csv", METRICS_HEADER, rows)

    emv_mean, emv_std = _mean_std(t_emvs)
    avg_mean, avg_std = _mean_std(t_avgs)
    lanes_mean = float(np.mean([m.emergency_lanes_formed for m in results]))
    completed_mean = float(np.mean([m.completed_trips for m in results]))
    arrivals = sum(1 for m in results if m.emv_arrived)
    _write_csv(
        out / "summary.csv",
        (
            "combo",
            "scenario",
            "seeds",
            "T_EMV_mean_s",
            "T_EMV_std_s",
            "T_avg_mean_s",
            "T_avg_std_s",
            "lanes_formed_mean",
            "completed_mean",
            "emv_arrivals",
        ),
        [(
            args.combo,
            scenario.name,
            len(seeds),
            emv_mean,
            emv_std,
            avg_mean,
            avg_std,
            lanes_mean,
            completed_mean,
            arrivals,
        )],
    )
    parameters = {"combo": args.combo}
    if args.checkpoint is not None:
        parameters["checkpoint"] = str(args.checkpoint)
    _write_manifest(out, "benchmark", scenario, seeds, parameters, ["metrics.csv", "summary.csv"])
    print(
        f"benchmark {args.combo} on {scenario.name} ({len(seeds)} seeds): "
        f"T_EMV={_fmt(emv_mean)}±{_fmt(emv_std)}s T_avg={_fmt(avg_mean)}±{_fmt(avg_std)}s"
    )
    return 0


# -- ablate ----------------------------------------------------------------------


def _ablation_one(scenario: Scenario, which: str, seed: int, episodes: int):
    net = scenario.build_network()
    result = train(scenario, net, seed, episodes, **_ablation_kwargs(which))
    rng = np.random.default_rng(seed + 10_000)
    env = TrafficEnv(scenario, net, rng, router="relaxation")
    policy = PolicyController(result.ma2c, rng=np.random.default_rng(seed + 100_000))
    metrics = run_episode(env, policy)
    tail = result.curve[-max(1, len(result.curve) // 4):]
    reward_variance = float(np.var([c.mean_reward for c in tail]))
    return metrics, reward_variance, result.curve


def cmd_ablate(args: argparse.Namespace) -> int:
    scenario = resolve_scenario(args.scenario)
    episodes = args.epochs if args.epochs is not None else scenario.train.episodes
    out = _prepare_out(args.out, args.force)
    seeds = list(range(args.seed, args.seed + args.seeds))

    results = _map_tasks(_ablation_one, [(scenario, args.which, s, episodes) for s in seeds])

    rows = []
    outputs = ["metrics.csv", "summary.csv"]
    t_emvs: list[float | None] = []
    t_avgs: list[float | None] = []
    variances: list[float] = []
    for seed, (m, variance, curve) in zip(seeds, results):
        t_emv = _censored(m.t_emv_s, scenario)
        rows.append((0, seed, t_emv, m.t_avg_s, m.emergency_lanes_formed, m.completed_trips))
        t_emvs.append(t_emv)
        t_avgs.append(m.t_avg_s)
        variances.append(variance)
        curve_name = f"curve_seed{seed}.csv"
        _write_curve(out / curve_name, curve, scenario)
        outputs.append(curve_name)
    _write_csv(out / "metrics.csv", METRICS_HEADER, rows)

    emv_mean, emv_std = _mean_std(t_emvs)
    avg_mean, avg_std = _mean_std(t_avgs)
    _write_csv(
        out / "summary.csv",
        (
            "variant",
            "scenario",
            "seeds",
            "T_EMV_mean_s",
            "T_EMV_std_s",
            "T_avg_mean_s",
            "T_avg_std_s",
            "reward_variance",
        ),
        [(
            args.which,
            scenario.name,
            len(seeds),
            emv_mean,
            emv_std,
            avg_mean,
            avg_std,
            float(np.mean(variances)),
        )],
    )
    _write_manifest(out, "ablate", scenario, seeds, {"which": args.which, "epochs": episodes}, outputs)
    print(
        f"ablation {args.which} on {scenario.name} ({len(seeds)} seeds): "
        f"T_EMV={_fmt(emv_mean)}±{_fmt(emv_std)}s reward_var={_fmt(float(np.mean(variances)))}"
    )
    return 0


# -- report ----------------------------------------------------------------------


def _read_csv(path: Path) -> list[list[str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.reader(fh))


def _markdown_table(rows: list[list[str]]) -> list[str]:
    if not rows:
        return []
    header, *body = rows
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in body:
        lines.append("| " + " | ".join(row) + " |")
    return lines


def _plot_name(root: Path, path: Path) -> str:
    return path.relative_to(root).as_posix().replace("/", "__")


def cmd_report(args: argparse.Namespace) -> int:
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)

    def wanted(path: Path) -> bool:
        return "plotdata" not in path.relative_to(root).parts

    manifests = sorted(p for p in root.rglob("manifest.json") if wanted(p))
    summaries = sorted(p for p in root.rglob("summary.csv") if wanted(p))
    curves = sorted(
        p
        for pattern in ("learning_curve.csv", "curve_seed*.csv")
        for p in root.rglob(pattern)
        if wanted(p)
    )
    routes = sorted(p for p in root.rglob("route.csv") if wanted(p))

    lines = ["# Run report", "", f"Generated by {_tool_version()}.", ""]
    if not manifests and not summaries and not curves:
        lines += ["No runs found.", ""]
        (root / "report.md").write_text("\n".join(lines), encoding="utf-8")
        print(f"wrote {root / 'report.md'} (no runs found)")
        return 0

    plotdata = root / "plotdata"
    plotdata.mkdir(exist_ok=True)

    gaps: list[str] = []
    lines += ["## Runs", ""]
    for mpath in manifests:
        with open(mpath, encoding="utf-8") as fh:
            manifest = json.load(fh)
        rel = mpath.parent.relative_to(root).as_posix() or "."
        scenario = manifest.get("scenario", {})
        lines.append(
            f"- `{rel}`: {manifest.get('command', '?')} on {scenario.get('name', '?')} "
            f"(seeds {manifest.get('seeds', [])})"
        )
        for name in manifest.get("outputs", []):
            if not (mpath.parent / name).exists():
                gaps.append(f"`{rel}` is missing declared output `{name}`")
    lines.append("")

    if summaries:
        lines += ["## Summaries", ""]
        for spath in summaries:
            lines.append(f"### {spath.relative_to(root).as_posix()}")
            lines.append("")
            lines += _markdown_table(_read_csv(spath))
            lines.append("")
            shutil.copyfile(spath, plotdata / _plot_name(root, spath))

    if curves:
        lines += ["## Learning curves", ""]
        for cpath in curves:
            rows = _read_csv(cpath)
            n = max(0, len(rows) - 1)
            final = rows[-1][-1] if n else "NA"
            lines.append(
                f"- `{cpath.relative_to(root).as_posix()}`: {n} episodes, final mean reward {final}"
            )
            shutil.copyfile(cpath, plotdata / _plot_name(root, cpath))
        lines.append("")

    if routes:
        lines += ["## Route traces", ""]
        for rpath in routes:
            rows = _read_csv(rpath)
            lines.append(f"- `{rpath.relative_to(root).as_posix()}`: {max(0, len(rows) - 1)} steps")
            shutil.copyfile(rpath, plotdata / _plot_name(root, rpath))
        lines.append("")

    lines += ["## Gaps", ""]
    if gaps:
        lines += [f"- {g}" for g in gaps]
    else:
        lines.append("- none")
    lines.append("")

    (root / "report.md").write_text("\n".join(lines), encoding="utf-8")
    print(f"wrote {root / 'report.md'} ({len(summaries)} summaries, {len(curves)} curves)")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clearway", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=_tool_version())
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, *, scenario: bool = True) -> None:
        if scenario:
            p.add_argument("--scenario", required=True, help="scenario file or shipped scenario name")
            p.add_argument("--seed", type=int, default=0, help="base RNG seed (default 0)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")

    p_train = sub.add_parser("train", help="train the controller and save a checkpoint")
    add_common(p_train)
    p_train.add_argument("--epochs", type=int, default=None, help="episodes to train (default: scenario setting)")
    p_train.add_argument("--ablation", choices=ABLATIONS, default="full", help="variant to train")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="replay one policy episode from a checkpoint")
    add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint.npz from train")
    p_eval.set_defaults(func=cmd_eval)

    p_bench = sub.add_parser("benchmark", help="run a controller combo over several seeds")
    add_common(p_bench)
    p_bench.add_argument("--combo", required=True, choices=COMBOS, help="controller combination")
    p_bench.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds (default 5)")
    p_bench.add_argument("--checkpoint", default=None, help="checkpoint.npz (required for combo 'rl')")
    p_bench.set_defaults(func=cmd_benchmark)

    p_ablate = sub.add_parser("ablate", help="retrain with one component removed")
    add_common(p_ablate)
    p_ablate.add_argument("--which", required=True, choices=ABLATIONS, help="component to remove")
    p_ablate.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds (default 3)")
    p_ablate.add_argument("--epochs", type=int, default=None, help="episodes per seed (default: scenario setting)")
    p_ablate.set_defaults(func=cmd_ablate)

    p_report = sub.add_parser("report", help="summarize an output tree into report.md")
    add_common(p_report, scenario=False)
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
