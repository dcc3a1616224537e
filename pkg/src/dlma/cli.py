"""Command-line entry points.

    dlma run --config cfg.yaml [--no-leader] [--no-follower] [--seed N]
    dlma resume <run-id> [--runs-dir DIR]
    dlma report <run-id> --kind cost|generations|support [--form F] [--json]
    dlma judge <run-id> --form acl|iclr|neurips
    dlma leader run --problem problem.txt --config cfg.yaml
    dlma leader report --run <run-id> --form acl|neurips
    dlma follower run --proposal plan.txt --config cfg.yaml
    dlma follower support-report --run <run-id> [--out data.csv]
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import orchestrator
from .config import load_config
from .errors import DlmaError


def _load(args, problem_file: str | None = None) -> "RunConfig":
    cfg = load_config(args.config)
    if problem_file:
        cfg.problem = ""
        cfg.problem_file = str(Path(problem_file).resolve())
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "run_id", None):
        cfg.run_id = args.run_id
    if getattr(args, "out", None):
        cfg.output_dir = str(Path(args.out).resolve())
    cfg.validate()
    return cfg


def _emit(text: str, rows, as_json: bool) -> None:
    if as_json:
        for row in rows:
            print(json.dumps(row, sort_keys=True))
    else:
        print(text)


def _finish_run(result) -> None:
    print(f"run: {result.run_id}")
    print(f"dir: {result.run_dir}")
    if result.artifact_path is not None:
        print(f"artifact: {result.artifact_path}")
    print(f"tokens: {result.total_tokens:,}")


def cmd_run(args) -> int:
    cfg = _load(args)
    result = orchestrator.execute_run(
        cfg, no_leader=args.no_leader, no_follower=args.no_follower)
    _finish_run(result)
    return 0


def cmd_resume(args) -> int:
    run_dir = orchestrator.find_run_dir(Path(args.runs_dir), args.run_id)
    result = orchestrator.resume_run(run_dir)
    _finish_run(result)
    return 0


def cmd_report(args) -> int:
    run_dir = orchestrator.find_run_dir(Path(args.runs_dir), args.run_id)
    text, rows = orchestrator.report(run_dir, args.kind, args.form)
    _emit(text, rows, args.json)
    return 0


def cmd_judge(args) -> int:
    run_dir = orchestrator.find_run_dir(Path(args.runs_dir), args.run_id)
    text, _ = orchestrator.judge_artifact(run_dir, args.form)
    print(text)
    return 0


def cmd_leader_run(args) -> int:
    cfg = _load(args, problem_file=args.problem)
    result = orchestrator.execute_run(cfg, leader_only=True)
    _finish_run(result)
    return 0


def cmd_leader_report(args) -> int:
    run_dir = orchestrator.find_run_dir(Path(args.runs_dir), args.run)
    text, rows = orchestrator.report(run_dir, "generations", args.form)
    _emit(text, rows, args.json)
    return 0


def cmd_follower_run(args) -> int:
    cfg = _load(args)
    proposal_text = Path(args.proposal).read_text(encoding="utf-8")
    result = orchestrator.execute_run(cfg, proposal_text=proposal_text)
    _finish_run(result)
    return 0


def cmd_follower_support_report(args) -> int:
    run_dir = orchestrator.find_run_dir(Path(args.runs_dir), args.run)
    text, rows = orchestrator.report(run_dir, "support")
    print(text)
    if args.out:
        lines = ["step,pre_hoc,post_hoc"]
        for row in rows:
            pre = "" if row["pre_hoc"] is None else f"{row['pre_hoc']:.6f}"
            post = "" if row["post_hoc"] is None else f"{row['post_hoc']:.6f}"
            lines.append(f"{row['step']},{pre},{post}")
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dlma",
        description="Double-loop research pipeline: evolve a plan, then execute it.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="full pipeline run from a config file")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--no-leader", action="store_true",
                       help="single prompted plan instead of evolution")
    run_p.add_argument("--no-follower", action="store_true",
                       help="execute a fixed plan: no re-planning meetings")
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--run-id")
    run_p.add_argument("--out", help="override output directory")
    run_p.set_defaults(func=cmd_run)

    resume_p = sub.add_parser("resume", help="continue an interrupted run")
    resume_p.add_argument("run_id")
    resume_p.add_argument("--runs-dir", default="runs")
    resume_p.set_defaults(func=cmd_resume)

    report_p = sub.add_parser("report", help="cost / generations / support reports")
    report_p.add_argument("run_id")
    report_p.add_argument("--kind", required=True,
                          choices=["cost", "generations", "support"])
    report_p.add_argument("--form", choices=["acl", "iclr", "neurips"])
    report_p.add_argument("--json", action="store_true",
                          help="machine-readable rows instead of the table")
    report_p.add_argument("--runs-dir", default="runs")
    report_p.set_defaults(func=cmd_report)

    judge_p = sub.add_parser("judge", help="judge the assembled document")
    judge_p.add_argument("run_id")
    judge_p.add_argument("--form", required=True, choices=["acl", "iclr", "neurips"])
    judge_p.add_argument("--runs-dir", default="runs")
    judge_p.set_defaults(func=cmd_judge)

    leader_p = sub.add_parser("leader", help="leader-loop commands")
    leader_sub = leader_p.add_subparsers(dest="leader_command", required=True)
    lrun = leader_sub.add_parser("run", help="evolve proposals only")
    lrun.add_argument("--problem", required=True)
    lrun.add_argument("--config", required=True)
    lrun.add_argument("--seed", type=int)
    lrun.add_argument("--run-id")
    lrun.add_argument("--out")
    lrun.set_defaults(func=cmd_leader_run)
    lreport = leader_sub.add_parser("report", help="per-generation statistics")
    lreport.add_argument("--run", required=True)
    lreport.add_argument("--form", choices=["acl", "iclr", "neurips"])
    lreport.add_argument("--json", action="store_true")
    lreport.add_argument("--runs-dir", default="runs")
    lreport.set_defaults(func=cmd_leader_report)

    follower_p = sub.add_parser("follower", help="follower-loop commands")
    follower_sub = follower_p.add_subparsers(dest="follower_command", required=True)
    frun = follower_sub.add_parser("run", help="execute a given proposal")
    frun.add_argument("--proposal", required=True)
    frun.add_argument("--config", required=True)
    frun.add_argument("--seed", type=int)
    frun.add_argument("--run-id")
    frun.add_argument("--out")
    frun.set_defaults(func=cmd_follower_run)
    freport = follower_sub.add_parser("support-report",
                                      help="pre-hoc / post-hoc support series")
    freport.add_argument("--run", required=True)
    freport.add_argument("--out", help="write plot-data CSV here")
    freport.add_argument("--runs-dir", default="runs")
    freport.set_defaults(func=cmd_follower_support_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DlmaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
