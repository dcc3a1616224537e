#!/usr/bin/env python3
"""Regenerate the shipped replay fixtures under tests/fixtures/.

Produces:
  e2e/        problem, reference corpus, run config, and the scripted
              transcript for a full deterministic pipeline run (plus judge
              entries so `dlma judge` works against the same transcript)
  table3/     a hand-built journal whose generation statistics render as
              min/mean/max = 3.00 / 3.86 / 4.00

The transcript is recorded by running the real pipeline against the
rule-based responder, then replayed once to confirm the scripted run
reproduces it byte-for-byte (modulo wall-clock fields).
"""

import shutil
import sys
import tempfile
from fractions import Fraction
from pathlib import Path

from dlma.config import load_config
from dlma.gateway import Gateway, transcript_from_journal, write_transcript
from dlma.journal import Journal, canonical_lines, read_events
from dlma.orchestrator import execute_run
from dlma.review import ReviewPanel
from dlma.synth import (
    DEFAULT_PROBLEM,
    FixtureResponder,
    ScriptedWorld,
    write_corpus,
)

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"

E2E_CONFIG = """\
problem_file: problem.txt
seed: 7
output_dir: runs
provider:
  mode: scripted
  transcript_path: transcript.jsonl
  temperature: 0.3
retrieval:
  mode: fixture
  corpus_dir: corpus
  k: 2
leader:
  pool_size: 3
  survivors: 3
  max_generations: 3
follower:
  adaptive: true
  instrumentation: true
latex:
  dry_run: true
workbench:
  interpreter: python3
"""


def e2e_world() -> ScriptedWorld:
    return ScriptedWorld(
        steps=[
            ("draft", "Write the introduction and position the problem"),
            ("code", "Implement the toy experiment and collect results"),
            ("draft", "Write the conclusion and open questions"),
        ],
        support={(2, "pre_hoc"): False},
        prehoc_changes={2},
        posthoc_changes={
            (2, 3): "Write the conclusion grounded in the experiment results",
        },
        defect_steps={1},
        workbench_scripts={2: [
            "```tool\ntool: shell_exec\ncommand: echo accuracy=0.91 > results.txt\n```",
            "```tool\ntool: file_read_page\npath: results.txt\npage: 1\n```",
            "```tool\ntool: terminate\nreason: results collected\n```",
        ]},
    )


def build_e2e() -> None:
    out = FIXTURES / "e2e"
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    (out / "problem.txt").write_text(DEFAULT_PROBLEM, encoding="utf-8")
    write_corpus(out / "corpus")
    (out / "config.yaml").write_text(E2E_CONFIG, encoding="utf-8")
    cfg = load_config(out / "config.yaml")

    with tempfile.TemporaryDirectory() as scratch:
        rec_cfg = load_config(out / "config.yaml")
        rec_cfg.output_dir = str(Path(scratch) / "record")
        result = execute_run(rec_cfg, responder=FixtureResponder(e2e_world()))
        entries = transcript_from_journal(read_events(result.journal_path))

        # Judge entries for `dlma judge <run> --form acl` on the artifact.
        artifact = result.artifact_path.read_text(encoding="utf-8")
        side = Journal.create(Path(scratch) / "judge.jsonl")
        gw = Gateway(side, responder=FixtureResponder(e2e_world()))
        ReviewPanel(gw).review(artifact, "acl", tag_prefix="judge.")
        entries += transcript_from_journal(side.events)
        side.close()

        write_transcript(entries, out / "transcript.jsonl")

        # Replay twice and require canonical equality.
        lines = []
        for sub in ("check1", "check2"):
            chk = load_config(out / "config.yaml")
            chk.output_dir = str(Path(scratch) / sub)
            replay = execute_run(chk)
            lines.append(canonical_lines(replay.journal_path))
            assert replay.artifact_path.exists()
        assert lines[0] == lines[1], "replay of the recorded transcript diverged"
    print(f"e2e fixture: {len(entries)} transcript entries -> {out}")


def build_table3() -> None:
    """25 judged candidates: 1 x 3.0, 5 x 3.5, 19 x 4.0 (mean 193/50 = 3.86)."""
    out = FIXTURES / "table3"
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    ratings = [Fraction(3)] + [Fraction(7, 2)] * 5 + [Fraction(4)] * 19
    assert sum(ratings) / len(ratings) == Fraction(193, 50)
    journal = Journal.create(out / "journal.jsonl")
    for i, rating in enumerate(ratings, start=1):
        journal.mark("proposal.scored", {
            "generation": 0,
            "proposal": f"p{i:04d}",
            "form": "acl",
            "rating": str(rating),
            "secondary": str(rating),
            "tertiary": str(rating),
            "content_sha": f"{i:016x}",
            "cached": False,
        })
    journal.mark("generation.stats", {
        "generation": 0,
        "count": len(ratings),
        "forms": {"acl": {
            "min": str(min(ratings)),
            "mean": str(sum(ratings) / len(ratings)),
            "max": str(max(ratings)),
        }},
    })
    journal.close()
    print(f"table3 fixture: {len(ratings)} scored candidates -> {out}")


def main() -> int:
    build_e2e()
    build_table3()
    return 0


if __name__ == "__main__":
    sys.exit(main())
