"""Run lifecycle: wiring, execution, resume, and reporting.

A run directory holds everything the run produces or needs to continue:

    runs/<run-id>/
      run_meta.json    variant flags and identity, written before anything else
      config.yaml      resolved copy of the configuration
      problem.txt      the problem statement
      journal.jsonl    the append-only event journal
      proposal_best.txt
      work/            follower scratch (workbench sessions, compile loops)
      artifact/        assembled document bundle

The journal is the single source of truth: `resume` re-executes the
pipeline with the journal cursor replaying recorded effects, so a run
killed at any journaled boundary continues to the same final state as an
uninterrupted one. Completed runs short-circuit and return the existing
artifact with no new provider calls.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig, derive_run_id, dump_config, load_config, semantic_digest
from .errors import ConfigError, DlmaError
from .follower import FollowerLoop, render_support_report, support_records_from_events
from .gateway import Gateway
from .journal import Journal, JournaledRandom, token_split, usage_totals
from .leader import (
    LeaderLoop,
    Proposal,
    render_generation_report,
    stats_from_events,
)
from .retrieval import Retriever
from .review import ReviewPanel, aggregate, normalize
from .workbench import Workbench


@dataclass
class RunResult:
    run_id: str
    run_dir: Path
    artifact_path: Path | None
    best_proposal_id: str
    total_tokens: int

    @property
    def journal_path(self) -> Path:
        return self.run_dir / "journal.jsonl"


def _variant(no_leader: bool, no_follower: bool, leader_only: bool,
             follower_only: bool) -> dict:
    return {
        "no_leader": no_leader,
        "no_follower": no_follower,
        "leader_only": leader_only,
        "follower_only": follower_only,
    }


def prepare_run_dir(cfg: RunConfig, run_id: str, variant: dict,
                    proposal_text: str | None) -> Path:
    run_dir = Path(cfg.output_dir) / run_id
    if (run_dir / "journal.jsonl").exists():
        raise ConfigError(
            f"run {run_id} already has a journal at {run_dir}; "
            "use resume, or pick a new run id / output dir")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "run_meta.json").write_text(json.dumps({
        "run_id": run_id,
        "variant": variant,
        "injected_proposal": proposal_text is not None,
    }, indent=2, sort_keys=True), encoding="utf-8")
    stored = dataclasses.replace(cfg, problem=cfg.problem_text(), problem_file="")
    dump_config(stored, run_dir / "config.yaml")
    (run_dir / "problem.txt").write_text(cfg.problem_text(), encoding="utf-8")
    if proposal_text is not None:
        (run_dir / "proposal_injected.txt").write_text(proposal_text, encoding="utf-8")
    return run_dir


def execute_run(
    cfg: RunConfig,
    *,
    no_leader: bool = False,
    no_follower: bool = False,
    leader_only: bool = False,
    proposal_text: str | None = None,
    resume_dir: Path | None = None,
    responder=None,
) -> RunResult:
    """Run (or resume) the pipeline and return the artifact handle.

    `--no-leader` replaces evolution with a single prompted plan;
    `--no-follower` executes the plan with re-planning meetings disabled
    (fixed plan, compile fixes only). `leader_only` stops after the best
    proposal; `proposal_text` skips the leader entirely and executes the
    given plan.
    """
    follower_only = proposal_text is not None
    variant = _variant(no_leader, no_follower, leader_only, follower_only)
    if resume_dir is not None:
        run_dir = Path(resume_dir)
        meta = json.loads((run_dir / "run_meta.json").read_text(encoding="utf-8"))
        run_id = meta["run_id"]
        variant = meta["variant"]
        if meta.get("injected_proposal"):
            proposal_text = (run_dir / "proposal_injected.txt").read_text(
                encoding="utf-8")
        journal = Journal.open_for_resume(run_dir / "journal.jsonl")
        done = journal.last("run.end")
        if done is not None:
            journal.close()
            artifact = done.payload.get("artifact_path")
            return RunResult(
                run_id, run_dir,
                run_dir / artifact if artifact else None,
                done.payload.get("best_proposal", ""),
                done.payload.get("total_tokens", 0),
            )
    else:
        run_id = derive_run_id(cfg)
        run_dir = prepare_run_dir(cfg, run_id, variant, proposal_text)
        journal = Journal.create(run_dir / "journal.jsonl")

    problem = cfg.problem_text()
    rng = JournaledRandom(cfg.seed, journal)
    if responder is not None:
        gateway = Gateway(journal, responder=responder,
                          temperature=cfg.provider.temperature,
                          max_output_tokens=cfg.provider.max_output_tokens)
    else:
        gateway = Gateway.from_config(cfg.provider, journal)
    retriever = Retriever(cfg.retrieval, journal)
    panel = ReviewPanel(gateway)
    try:
        journal.mark("run.start", {
            "run_id": run_id,
            "seed": cfg.seed,
            "config_digest": semantic_digest(cfg, problem),
            "problem_sha": hashlib.sha256(problem.encode()).hexdigest()[:16],
            "variant": variant,
        })

        # Upper loop: pick the plan.
        if variant["follower_only"]:
            best = Proposal("p0001", proposal_text, 0, "seed-unchanged")
            journal.mark("proposal.created", {
                "id": best.id, "op": best.lineage_op, "parents": [],
                "generation_born": 0, "content_sha": best.content_sha,
            })
        elif variant["no_leader"]:
            content = gateway.ask("leader.single", [(
                "user",
                "Write a single research proposal for the problem below, with "
                "sections Title, Problem Restatement, Method Plan, Experiment "
                "Plan.\n\n" + problem,
            )])
            best = Proposal("p0001", content, 0, "seed-unchanged")
            journal.mark("proposal.created", {
                "id": best.id, "op": best.lineage_op, "parents": [],
                "generation_born": 0, "content_sha": best.content_sha,
            })
        else:
            leader = LeaderLoop(cfg.leader, gateway, retriever, panel, journal, rng)
            best, _ = leader.run(problem)
        (run_dir / "proposal_best.txt").write_text(best.content, encoding="utf-8")

        artifact_path: Path | None = None
        if variant["leader_only"]:
            artifact_rel = "proposal_best.txt"
            artifact_path = run_dir / artifact_rel
        else:
            follower_cfg = cfg.follower
            if variant["no_follower"]:
                follower_cfg = dataclasses.replace(
                    cfg.follower, adaptive=False, instrumentation=False)
            workbench = Workbench(cfg.workbench, journal, gateway)
            follower = FollowerLoop(
                follower_cfg, cfg.latex, gateway, retriever, workbench,
                journal, run_dir / "work")
            info = follower.run(best.content, run_dir / "artifact")
            artifact_rel = f"artifact/{info['artifact']}"
            artifact_path = run_dir / artifact_rel

        total_tokens, _ = usage_totals(journal.events)
        split = token_split(journal.events)
        journal.record("metrics", lambda: ({
            "total_tokens": total_tokens,
            "leader_tokens": split["leader"],
            "follower_tokens": split["follower"],
            "other_tokens": split["other"],
        }, {}))
        journal.record("run.end", lambda: ({
            "artifact_path": artifact_rel,
            "best_proposal": best.id,
            "total_tokens": total_tokens,
        }, {}))
        return RunResult(run_id, run_dir, artifact_path, best.id, total_tokens)
    finally:
        journal.close()


def resume_run(run_dir: Path) -> RunResult:
    run_dir = Path(run_dir)
    if not (run_dir / "run_meta.json").exists():
        raise ConfigError(f"no run at {run_dir}")
    cfg = load_config(run_dir / "config.yaml")
    return execute_run(cfg, resume_dir=run_dir)


# -- reports -----------------------------------------------------------------


def _phase_wall(events, start_type: str, start_pred, end_type: str) -> float:
    start_ts = end_ts = None
    for ev in events:
        if ev.type == start_type and start_pred(ev) and start_ts is None:
            start_ts = ev.volatile.get("ts")
        if ev.type == end_type:
            end_ts = ev.volatile.get("ts")
    if start_ts is None or end_ts is None:
        return 0.0
    return max(0.0, end_ts - start_ts)


def cost_report(events) -> tuple[str, list[dict]]:
    """Wall time and token totals, split by component."""
    total_tokens, wall = usage_totals(events)
    split = token_split(events)
    leader_wall = _phase_wall(events, "leader.start", lambda ev: True, "leader.done")
    follower_wall = _phase_wall(events, "plan.created", lambda ev: True,
                                "follower.done")
    rows = [
        {"component": "leader", "time_s": leader_wall, "tokens": split["leader"]},
        {"component": "follower", "time_s": follower_wall,
         "tokens": split["follower"]},
        {"component": "total", "time_s": wall, "tokens": total_tokens},
    ]
    lines = ["Component  Time (s)      Tokens", "---------  ---------  ----------"]
    for row in rows:
        lines.append(
            f"{row['component']:<9}  {int(round(row['time_s'])):>8,}  "
            f"{row['tokens']:>10,}")
    summary = (f"total: {int(round(wall)):,} s / {total_tokens:,} tokens")
    lines.append(summary)
    return "\n".join(lines), rows


def generations_report(events, forms: list[str] | None = None) -> tuple[str, list[dict]]:
    return render_generation_report(stats_from_events(events), forms)


def support_report(events) -> tuple[str, list[dict]]:
    return render_support_report(support_records_from_events(events))


def report(run_dir: Path, kind: str, form: str | None = None) -> tuple[str, list[dict]]:
    from .journal import read_events

    journal_path = Path(run_dir) / "journal.jsonl"
    if not journal_path.exists():
        raise ConfigError(f"no journal for run at {run_dir}")
    events = read_events(journal_path)
    if kind == "cost":
        return cost_report(events)
    if kind == "generations":
        return generations_report(events, [form] if form else None)
    if kind == "support":
        return support_report(events)
    raise ConfigError(f"unknown report kind {kind!r}")


def judge_artifact(run_dir: Path, form: str) -> tuple[str, dict]:
    """Post-run judging of the assembled document under a chosen form.

    Uses a side journal (judge-<form>.jsonl) so the run journal stays a
    faithful record of the run itself.
    """
    run_dir = Path(run_dir)
    source = run_dir / "artifact" / "paper_source.tex"
    if not source.exists():
        raise ConfigError(f"run at {run_dir} has no assembled artifact")
    cfg = load_config(run_dir / "config.yaml")
    side_path = run_dir / f"judge-{form}.jsonl"
    if side_path.exists():
        side_path.unlink()
    journal = Journal.create(side_path)
    try:
        gateway = Gateway.from_config(cfg.provider, journal)
        panel = ReviewPanel(gateway)
        review = panel.review(source.read_text(encoding="utf-8"), form,
                              artifact_id="artifact", tag_prefix="judge.")
        rating = aggregate(review)
        normalized = normalize(review)
    finally:
        journal.close()
    lines = [f"form: {form}", f"rating: {float(rating):.3f}"]
    for name, value in review.scores.items():
        lines.append(f"{name}: {value}  (normalized {float(normalized[name]):.3f})")
    data = {
        "form": form,
        "rating": float(rating),
        "scores": {k: float(v) for k, v in review.scores.items()},
        "normalized": {k: float(v) for k, v in normalized.items()},
    }
    return "\n".join(lines), data


def find_run_dir(runs_dir: Path, run_id: str) -> Path:
    run_dir = Path(runs_dir) / run_id
    if not run_dir.exists():
        raise ConfigError(f"unknown run id {run_id!r} under {runs_dir}")
    return run_dir
