"""Synthetic scripted runs: a deterministic rule-based responder.

Fixtures for replay tests are too long to hand-author call by call, so
this module fakes the model side of the pipeline with simple rules. The
responder reads the prompts it is given (step indices, proposal bodies,
source listings) and answers in the exact wire formats the engine parses.
Running the pipeline once against the responder records a journal, and the
journal's provider calls become the transcript that scripted runs replay.

Proposal quality is simulated through an explicit `Quality-Signal: <n>`
line inside each generated proposal: the fake reviewer maps that signal to
rubric scores, improvement bumps it by one, and integration takes the
better parent's signal plus one, capped at 4. That gives evolution runs an
improving, plateauing score trajectory without any hidden state.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

from .config import RunConfig
from .gateway import transcript_from_journal, write_transcript
from .journal import read_events
from .orchestrator import execute_run

_QUALITY_RE = re.compile(r"Quality-Signal:\s*(\d+)")
_STEP_RE = re.compile(r"[Ss]tep (\d+)[ :(]")
_POSTHOC_TARGET_RE = re.compile(r"Step (\d+) \(current\):")
_POSTHOC_AFTER_RE = re.compile(r"Section (\d+) was just drafted")
_SOURCE_RE = re.compile(r"^--- (contextual|external) (\S+)", re.MULTILINE)

MAX_QUALITY = 4

CLEAN_SECTION = """\\section{{{title}}}
{body}
"""

DEFECT_SECTION = """\\section{{{title}}}
{body}
\\begin{{itemize}}
\\item A list item that is never closed properly.
\\end{{enumerate}}
"""

TERMINATE_BLOCK = "```tool\ntool: terminate\nreason: done\n```"


def proposal_text(n: int, quality: int, origin: str) -> str:
    quality = max(0, min(MAX_QUALITY, quality))
    return (
        f"Title: Candidate Plan {n} ({origin})\n"
        f"Quality-Signal: {quality}\n"
        "Problem Restatement: Ground the stated problem in measurable terms.\n"
        f"Method Plan: Variant {n} of the staged approach with component "
        f"analysis level {quality}.\n"
        "Experiment Plan: Toy benchmark with ablations and a fixed seed.\n"
    )


def quality_of(text: str, default: int = 1) -> int:
    m = _QUALITY_RE.search(text)
    return int(m.group(1)) if m else default


def scores_block(form: str, quality: int) -> str:
    """Grid-valid rubric scores derived from the quality signal."""
    q = max(0, min(MAX_QUALITY, quality))
    if form == "acl":
        overall = 3.0 + 0.5 * q
        sound = min(5.0, 3.0 + 0.5 * q)
        excite = min(5.0, 2.5 + 0.5 * q)
        lines = [
            "Reviewer Confidence: 4.0",
            f"Soundness: {sound}",
            f"Excitement: {excite}",
            f"Overall Assessment: {min(5.0, overall)}",
        ]
    elif form == "iclr":
        lines = [
            f"Soundness: {min(4, 2 + q // 2)}",
            "Presentation: 3",
            f"Contribution: {min(4, 1 + q)}",
            f"Rating: {min(10, 5 + q)}",
            "Confidence: 4",
        ]
    elif form == "neurips":
        lines = [
            f"Quality: {min(4, 2 + q // 2)}",
            "Clarity: 3",
            f"Significance: {min(4, 1 + q)}",
            f"Originality: {min(4, 2 + q // 2)}",
            f"Overall: {min(6, 2 + q)}",
            "Confidence: 4",
        ]
    else:
        raise ValueError(f"unknown form {form!r}")
    return "```scores\n" + "\n".join(lines) + "\n```"


FEEDBACK_TEXTS = {
    "acl": (
        "Paper Summary: A staged plan for the stated problem.\n"
        "Summary of Strengths: Clear structure and a concrete benchmark.\n"
        "Summary of Weaknesses: Limited novelty in the weakest variants.\n"
        "Comments Suggestions And Typos: None of note.\n"
    ),
    "iclr": (
        "Summary: A staged plan for the stated problem.\n"
        "Strengths: Concrete benchmark.\n"
        "Weaknesses: Scope is narrow.\n"
        "Questions: How does the plan scale?\n"
    ),
    "neurips": (
        "Summary: A staged plan for the stated problem.\n"
        "Strengths And Weaknesses: Solid structure; limited scale.\n"
        "Questions: How does the plan scale?\n"
        "Limitations: Toy benchmark only.\n"
    ),
}


@dataclass
class ScriptedWorld:
    """Tunable behavior of the fake model.

    steps: (kind, text) pairs the decomposition call returns.
    support: (step, phase) -> verdict; phases are "pre_hoc" / "post_hoc";
        anything missing defaults to supported.
    prehoc_changes / posthoc_changes: which revisions happen; everything
        else declines with the no-change marker.
    defect_steps: steps whose first draft ships a LaTeX defect.
    fix_mode: "fix" repairs on the first attempt, "never" keeps the defect.
    workbench_scripts: step -> list of raw tool-block replies; code steps
        without a script terminate immediately.
    """

    steps: list[tuple[str, str]] = field(default_factory=lambda: [
        ("draft", "Write the introduction and position the problem"),
        ("code", "Implement the toy experiment and collect results"),
        ("draft", "Write the conclusion and open questions"),
    ])
    support: dict[tuple[int, str], bool] = field(default_factory=dict)
    prehoc_changes: set[int] = field(default_factory=set)
    posthoc_changes: dict[tuple[int, int], str] = field(default_factory=dict)
    defect_steps: set[int] = field(default_factory=set)
    fix_mode: str = "fix"
    involve_quality: list[int] = field(default_factory=lambda: [1, 2])
    query_terms: list[str] = field(default_factory=lambda: [
        "state space interpretability",
        "token attribution probes",
        "cross lingual transfer",
    ])
    workbench_scripts: dict[int, list[str]] = field(default_factory=dict)


class FixtureResponder:
    """responder(tag, messages) -> text, in the engine's wire formats."""

    def __init__(self, world: ScriptedWorld | None = None):
        self.world = world or ScriptedWorld()
        self._counts: dict[str, int] = {}
        self._assess_seen: dict[int, int] = {}
        self._proposal_counter = 0

    def _n(self, key: str) -> int:
        self._counts[key] = self._counts.get(key, 0) + 1
        return self._counts[key]

    def __call__(self, tag: str, messages) -> str:
        prompt = "\n".join(text for _, text in messages)
        if tag.endswith(".query") or tag == "follower.observe.query":
            terms = self.world.query_terms
            return "QUERY: " + terms[(self._n(tag) - 1) % len(terms)]
        if tag in ("leader.involve.generate", "leader.single"):
            self._proposal_counter += 1
            idx = self._n(tag) - 1
            qualities = self.world.involve_quality
            quality = qualities[idx % len(qualities)]
            return proposal_text(self._proposal_counter, quality, "involve")
        if tag == "leader.improve.reflect":
            return ("The proposal lacks a baseline comparison and does not "
                    "state its evaluation protocol.")
        if tag == "leader.improve.revise":
            self._proposal_counter += 1
            quality = quality_of(prompt) + 1
            return proposal_text(self._proposal_counter, quality, "improve")
        if tag == "leader.integrate.strengths":
            return ("Proposal A contributes the cleaner method staging; "
                    "proposal B contributes the stronger evaluation design.")
        if tag == "leader.integrate.generate":
            self._proposal_counter += 1
            signals = [int(m) for m in _QUALITY_RE.findall(prompt)] or [1]
            quality = max(signals) + 1
            return proposal_text(self._proposal_counter, quality, "integrate")
        m = re.match(r"(?:leader|judge)\.review\.(\w+)\.(feedback|scores)", tag)
        if m:
            form, phase = m.group(1), m.group(2)
            if phase == "feedback":
                return FEEDBACK_TEXTS[form]
            return scores_block(form, quality_of(prompt))
        if tag == "follower.plan.decompose":
            return "\n".join(
                f"{i}. [{kind}] {text}"
                for i, (kind, text) in enumerate(self.world.steps, start=1)
            )
        if tag == "follower.observe.locate":
            return self._locate(prompt)
        if tag == "follower.support.assess":
            return self._assess(prompt)
        if tag == "follower.prehoc.revise":
            step = self._step_of(prompt)
            if step in self.world.prehoc_changes:
                return (f"{self._step_text(step)} "
                        "(revised after checking the observations)")
            return "NO-CHANGE"
        if tag == "follower.execute.draft":
            return self._draft(prompt)
        if tag == "follower.latex.fix":
            return self._fix(prompt)
        if tag == "follower.posthoc.revise":
            after = int(_POSTHOC_AFTER_RE.search(prompt).group(1))
            target = int(_POSTHOC_TARGET_RE.search(prompt).group(1))
            new_text = self.world.posthoc_changes.get((after, target))
            return new_text if new_text else "NO-CHANGE"
        if tag == "follower.workbench.step":
            return self._workbench(prompt)
        raise KeyError(f"fixture responder has no rule for tag {tag!r}")

    # -- follower helpers --------------------------------------------------

    def _step_of(self, prompt: str) -> int:
        m = _STEP_RE.search(prompt)
        if not m:
            raise ValueError("no step index in prompt")
        return int(m.group(1))

    def _step_text(self, step: int) -> str:
        return self.world.steps[step - 1][1]

    def _locate(self, prompt: str) -> str:
        sources = _SOURCE_RE.findall(prompt)
        lines = []
        for kind, origin in sources:
            if len(lines) >= 2:
                break
            lines.append(f"OBSERVATION: {kind} {origin} 1-2")
        return "\n".join(lines) if lines else "OBSERVATION: none"

    def _assess(self, prompt: str) -> str:
        step = self._step_of(prompt)
        seen = self._assess_seen.get(step, 0)
        self._assess_seen[step] = seen + 1
        phase = "pre_hoc" if seen == 0 else "post_hoc"
        supported = self.world.support.get((step, phase), True)
        verdict = "yes" if supported else "no"
        reason = ("observations ground the step" if supported
                  else "observations do not cover the step")
        return f"SUPPORTED: {verdict}\nRationale: {reason}."

    def _draft(self, prompt: str) -> str:
        step = self._step_of(prompt)
        kind, text = self.world.steps[step - 1]
        title = f"Section {step}"
        body = f"This section addresses: {text}."
        if step in self.world.defect_steps:
            return DEFECT_SECTION.format(title=title, body=body)
        return CLEAN_SECTION.format(title=title, body=body)

    def _fix(self, prompt: str) -> str:
        n = self._n("fix")
        if self.world.fix_mode == "never":
            return DEFECT_SECTION.format(
                title="Still Broken", body=f"Attempt {n} keeps the defect.")
        m = re.search(r"\\section\{(.+?)\}", prompt)
        title = m.group(1) if m else "Section"
        return CLEAN_SECTION.format(
            title=title, body="Corrected content after the compile report.")

    def _workbench(self, prompt: str) -> str:
        step = self._step_of(prompt)
        queue = self.world.workbench_scripts.get(step)
        if queue:
            idx = self._n(f"workbench.{step}") - 1
            if idx < len(queue):
                return queue[idx]
        return TERMINATE_BLOCK


@dataclass
class CorpusDoc:
    id: str
    title: str
    abstract: str
    body: list[str]


DEFAULT_CORPUS = [
    CorpusDoc(
        "ref-001",
        "Probing Token Interactions In State Space Models",
        "Attribution probes for state space interpretability on long inputs.",
        [
            "State space layers mix tokens through a recurrent scan.",
            "Attribution probes recover token-to-token interaction maps.",
            "The probe compares favorably with attention rollout baselines.",
            "Calibration matters when the scan length grows.",
            "SENTINEL-DO-NOT-QUOTE marker line for context-audit tests.",
            "Probe overhead stays below ten percent of inference cost.",
            "Releasing the probe suite enables replication.",
            "Future work targets streaming evaluation.",
        ],
    ),
    CorpusDoc(
        "ref-002",
        "Token Attribution Probes For Sequence Classifiers",
        "A study of token attribution probes and their failure modes.",
        [
            "Attribution methods disagree most on short inputs.",
            "Probes trained on frozen features transfer across tasks.",
            "Sanity checks catch degenerate attribution maps.",
            "A shared benchmark would ease comparison.",
            "Aggregating probes reduces variance.",
            "Probe ensembles track human rationales better.",
        ],
    ),
    CorpusDoc(
        "ref-003",
        "Cross Lingual Transfer With Staged Adapters",
        "Staged adapters narrow the cross lingual performance gap.",
        [
            "Adapters staged by language family share parameters.",
            "The gap narrows most for low-resource pairs.",
            "Training cost grows linearly with stages.",
            "Evaluation covers forty languages.",
            "Stage order is learned, not fixed.",
            "Ablating the final stage costs two points.",
        ],
    ),
]


def write_corpus(corpus_dir: Path, docs: list[CorpusDoc] | None = None) -> None:
    corpus_dir.mkdir(parents=True, exist_ok=True)
    for doc in docs or DEFAULT_CORPUS:
        body = "\n".join(doc.body)
        (corpus_dir / f"{doc.id}.txt").write_text(
            f"id: {doc.id}\ntitle: {doc.title}\nabstract: {doc.abstract}\n---\n{body}\n",
            encoding="utf-8",
        )


DEFAULT_PROBLEM = (
    "How can token-to-token interactions inside state space sequence models "
    "be attributed and evaluated at scale?"
)


def small_run_config(base_dir: Path, *, seed: int = 7, pool_size: int = 2,
                     max_generations: int = 2,
                     transcript_name: str = "transcript.jsonl") -> RunConfig:
    """A fast, fully offline configuration rooted under base_dir."""
    corpus_dir = base_dir / "corpus"
    if not corpus_dir.exists():
        write_corpus(corpus_dir)
    problem_path = base_dir / "problem.txt"
    if not problem_path.exists():
        problem_path.write_text(DEFAULT_PROBLEM, encoding="utf-8")
    cfg = RunConfig()
    cfg.problem_file = str(problem_path)
    cfg.seed = seed
    cfg.output_dir = str(base_dir / "runs")
    cfg.provider.mode = "scripted"
    cfg.provider.transcript_path = str(base_dir / transcript_name)
    cfg.retrieval.corpus_dir = str(corpus_dir)
    cfg.retrieval.k = 2
    cfg.leader.pool_size = pool_size
    cfg.leader.survivors = pool_size
    cfg.leader.max_generations = max_generations
    cfg.follower.max_steps = 16
    cfg.validate()
    return cfg


def record_transcript(cfg: RunConfig, responder, scratch_dir: Path,
                      **run_kwargs) -> list[tuple[str, str]]:
    """Run once against the responder; return the provider calls it made."""
    rec_cfg = dataclasses.replace(cfg, output_dir=str(scratch_dir))
    rec_cfg.run_id = "recording"
    result = execute_run(rec_cfg, responder=responder, **run_kwargs)
    return transcript_from_journal(read_events(result.journal_path))


def build_fixture(cfg: RunConfig, world: ScriptedWorld, scratch_dir: Path,
                  **run_kwargs) -> Path:
    """Record a transcript for cfg and write it where cfg expects it."""
    entries = record_transcript(cfg, FixtureResponder(world), scratch_dir,
                                **run_kwargs)
    out = Path(cfg.provider.transcript_path)
    write_transcript(entries, out)
    return out


# -- support-rate perturbation scenario ---------------------------------------

SCENARIO_RUNS = 5
SCENARIO_STEPS = 10


def support_scenario_world(run_index: int, runs: int = SCENARIO_RUNS,
                           steps: int = SCENARIO_STEPS) -> ScriptedWorld:
    """One run of the perturbation scenario.

    Pre-hoc support degrades along the plan: step s is supported in
    `runs - floor((s-1) * runs / steps)` of the runs, so the pooled
    pre-hoc rate is non-increasing in s. After the post-hoc meeting every
    step is supported, so the post-hoc rate dominates everywhere.
    """
    support: dict[tuple[int, str], bool] = {}
    for s in range(1, steps + 1):
        keep = runs - ((s - 1) * runs) // steps
        support[(s, "pre_hoc")] = run_index < keep
        support[(s, "post_hoc")] = True
    plan = [("draft", f"Draft part {i} of the study") for i in range(1, steps + 1)]
    return ScriptedWorld(steps=plan, support=support)


def run_support_scenario(base_dir: Path, runs: int = SCENARIO_RUNS,
                         steps: int = SCENARIO_STEPS) -> list:
    """Execute the scenario as follower-only runs; returns the run handles."""
    results = []
    for r in range(runs):
        cfg = small_run_config(base_dir, seed=1000 + r)
        world = support_scenario_world(r, runs, steps)
        results.append(execute_run(
            cfg,
            proposal_text="Title: Scenario Plan\nMethod Plan: staged approach\n",
            responder=FixtureResponder(world),
        ))
    return results
