"""Command-line entry point: ``stacca {train,eval,ablate,graph}``.

Exit codes: 0 success, 2 configuration error, 3 missing or unreadable
artifact, 4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from stacca import config as cfgmod
from stacca.autodiff import NumericError
from stacca.env import ConfigError
from stacca.evaluate import (
    ArtifactError,
    EvalScenario,
    Injection,
    ablation_suite,
    compare,
    write_summary,
    write_timeseries,
)
from stacca.graph import GraphSpec, InvalidSpecError, generate
from stacca.train import STREAMS, train

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4


def _threads(n: int | None):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _write_run_header(run_dir: Path, exp: cfgmod.ExperimentConfig) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved.toml").write_text(cfgmod.resolved_text(exp))
    seeds = {"seed": exp.train.seed, "streams": list(STREAMS), "graph_seed": exp.graph.seed}
    (run_dir / "seeds.json").write_text(json.dumps(seeds, indent=2) + "\n")


def cmd_train(args) -> int:
    exp = cfgmod.load_config(args.config, args.set)
    run_dir = Path(args.out) if args.out else exp.run_dir
    graph = generate(exp.graph)
    _write_run_header(run_dir, exp)
    graph.save(run_dir / "graph.edgelist")

    def report(row):
        if not args.quiet:
            print(f"iter {row['iter']:4d}  reward {row['mean_episode_reward']:9.3f}  "
                  f"entropy {row['entropy']:.3f}  {row['wall_ms'] / 1e3:.1f}s", flush=True)

    if args.resume and not Path(args.resume).is_file():
        raise ArtifactError(f"checkpoint not found: {args.resume}")
    train(graph, exp.env, exp.model, exp.train, out_dir=run_dir, resume=args.resume,
          progress=report)
    print(f"run written to {run_dir}")
    return EXIT_OK


def _scenario(tab: dict, base_dir: Path) -> EvalScenario:
    tab = dict(tab)
    known = {"name", "graph", "env", "episodes", "horizon", "checkpoint", "deterministic",
             "injection", "init_control", "kind", "seed"}
    for k in tab:
        if k not in known:
            raise ConfigError(f"unknown config key scenario.{k}")
    if "graph" not in tab:
        raise ConfigError("scenario needs a [scenario.graph] table")
    g = dict(tab["graph"])
    g.setdefault("seed", 0)
    graph = cfgmod.build_section(GraphSpec, g, "scenario.graph")
    graph.validate()
    inj = tab.get("injection")
    ckpt = tab.get("checkpoint")
    if ckpt is not None and not Path(ckpt).is_absolute():
        ckpt = str(base_dir / ckpt)
    return EvalScenario(
        graph_spec=graph,
        env_overrides=dict(tab.get("env", {})),
        episodes=int(tab.get("episodes", 100)),
        horizon=int(tab.get("horizon", 100)),
        policy_checkpoint=ckpt,
        deterministic=bool(tab.get("deterministic", False)),
        injection=cfgmod.build_section(Injection, inj, "scenario.injection") if inj else None,
        init_control=tab.get("init_control"),
        kind=tab.get("kind"),
        seed=int(tab.get("seed", 0)),
        name=str(tab.get("name", "")),
    )


def cmd_eval(args) -> int:
    scenarios, baselines = [], None
    for path in args.scenarios:
        if not Path(path).is_file():
            raise ArtifactError(f"scenario file not found: {path}")
        tree = cfgmod.load_tree(path)
        for k in tree:
            if k not in ("scenario", "baselines"):
                raise ConfigError(f"unknown config key {k}")
        if "baselines" in tree:
            baselines = list(tree["baselines"])
        scenarios += [_scenario(t, Path(path).parent) for t in tree.get("scenario", [])]
    if not scenarios:
        raise ConfigError("no scenarios given")
    if args.baselines is not None:
        baselines = [b for b in args.baselines.split(",") if b]
    if baselines is None:
        baselines = ["ZeroControl", "FullControl", "RandomPolicy"]
    rows = compare(scenarios, {}, baselines)
    out = Path(args.out) if args.out else Path(os.environ.get(cfgmod.OUTPUT_ENV_VAR, "."))
    out.mkdir(parents=True, exist_ok=True)
    write_timeseries(out / "timeseries.csv", rows)
    write_summary(out / "summary.csv", rows)
    for row in rows:
        m = row.metrics
        print(f"{row.scenario:28s} {row.policy:14s} final {m.final_frac:.3f}  "
              f"reward {m.reward_mean:9.3f} +- {m.reward_stderr:.3f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    exp = cfgmod.load_config(args.config, args.set)
    run_dir = Path(args.out) if args.out else exp.run_dir
    _write_run_header(run_dir, exp)
    graph = generate(exp.graph)
    graph.save(run_dir / "graph.edgelist")
    ablation_suite(graph, exp.env, exp.model, exp.train, runs=args.runs, out_dir=run_dir)
    print(f"ablation written to {run_dir}")
    return EXIT_OK


def cmd_graph(args) -> int:
    spec = GraphSpec(args.family, args.nodes, args.seed, m=args.m, k=args.k, p=args.p)
    g = generate(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    g.save(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stacca", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS threads (1 gives bit-reproducible runs)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train actor and critic")
    t.add_argument("--config", required=False)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--out", help="run directory (default: output_dir/run_name)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints and baselines on scenarios")
    e.add_argument("scenarios", nargs="*")
    e.add_argument("--out")
    e.add_argument("--baselines", help="comma-separated baseline names")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train the five ablation variants")
    a.add_argument("--config", required=False)
    a.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    a.add_argument("--runs", type=int, default=3)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("graph", help="write a generated graph as an edge list")
    g.add_argument("--family", choices=("ba", "ws"), default="ba")
    g.add_argument("--nodes", type=int, required=True)
    g.add_argument("--m", type=int, default=1)
    g.add_argument("--k", type=int, default=4)
    g.add_argument("--p", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_graph)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _threads(args.threads):
            return args.func(args)
    except (ConfigError, InvalidSpecError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArtifactError, FileNotFoundError) as err:
        print(f"artifact error: {err}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
