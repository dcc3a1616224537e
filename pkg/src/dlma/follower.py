"""Step-by-step plan execution with observation-conditioned re-planning.

The winning proposal becomes a versioned to-do list. Each step then runs
a fixed seven-phase sequence:

    gather observations -> pre-hoc support check -> pre-hoc revision ->
    execute (draft, with a tool-workbench session first for code tasks) ->
    post-hoc downstream update -> post-hoc support check -> mark done

Observations are verbatim line spans located by the model inside the
existing draft (contextual) and retrieved references (external); invalid
spans are dropped and journaled, never silently repaired. After a step is
executed, every later step may be revised in ascending order — each
revision sees the revisions before it — while every earlier step must
remain byte-identical; that immutability is asserted on every post-hoc
event, not assumed.

Degradation policy: observation, revision, and support-judging failures
never abort a run. They are journaled and the step proceeds with
best-effort inputs. Only gateway and configuration failures are fatal.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

from .config import FollowerConfig, LatexConfig
from .errors import EmptyResponse, ParseError
from .gateway import Gateway
from .journal import Journal
from .latexpipe import assemble, revise_until_clean
from .retrieval import PaperRef, Retriever
from .workbench import TRUNCATION_MARKER, Workbench, flatten_project

STEP_KINDS = ("draft_section", "code_task")
NO_CHANGE_MARKER = "NO-CHANGE"


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class PlanStep:
    index: int
    versions: list[str]
    kind: str
    status: str = "pending"   # pending -> active -> done

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise ValueError(f"unknown step kind {self.kind!r}")
        if not self.versions:
            raise ValueError("a step needs at least one version")

    @property
    def latest(self) -> str:
        return self.versions[-1]

    def append_version(self, text: str) -> None:
        if self.status == "done":
            raise ValueError(f"step {self.index} is done; versions are frozen")
        self.versions.append(text)

    def version_shas(self) -> list[str]:
        return [_sha(v) for v in self.versions]


@dataclass
class TodoList:
    steps: list[PlanStep]
    round: int = 0

    def step(self, index: int) -> PlanStep:
        return self.steps[index - 1]

    def set_active(self, index: int) -> None:
        active = [s.index for s in self.steps if s.status == "active"]
        if active:
            raise ValueError(f"step(s) {active} already active")
        step = self.step(index)
        if step.status != "pending":
            raise ValueError(f"step {index} is {step.status}, cannot activate")
        step.status = "active"

    def mark_done(self, index: int) -> None:
        step = self.step(index)
        if step.status != "active":
            raise ValueError(f"step {index} is {step.status}, cannot finish")
        step.status = "done"

    def snapshot_shas(self) -> dict[int, list[str]]:
        return {s.index: s.version_shas() for s in self.steps}


@dataclass(frozen=True)
class Observation:
    source: str      # contextual | external
    origin_id: str   # "section-<n>" or a reference id
    span: tuple[int, int]
    text: str

    def to_dict(self) -> dict:
        return {"source": self.source, "origin_id": self.origin_id,
                "span": list(self.span), "text": self.text}


@dataclass
class Draft:
    section: int
    text: str
    compile_status: str = "unchecked"   # unchecked | clean | dirty


@dataclass(frozen=True)
class SupportRecord:
    step: int
    phase: str       # pre_hoc | post_hoc
    round: int
    supported: bool
    rationale: str


# -- parsing ----------------------------------------------------------------

_STEP_LINE_RE = re.compile(r"^\s*(\d+)\.\s*\[(draft|code)\]\s*(.+?)\s*$", re.MULTILINE)
_KIND_MAP = {"draft": "draft_section", "code": "code_task"}

_OBS_LINE_RE = re.compile(
    r"^OBSERVATION:\s*(contextual|external)\s+(\S+)\s+(\d+)-(\d+)\s*$", re.MULTILINE)
_OBS_NONE_RE = re.compile(r"^OBSERVATION:\s*none\s*$", re.MULTILINE)
_SUPPORT_RE = re.compile(r"^SUPPORTED:\s*(yes|no)\s*$", re.MULTILINE | re.IGNORECASE)


def parse_decomposition(text: str) -> list[tuple[int, str, str]]:
    """(index, kind, text) triples from numbered '[draft]'/'[code]' lines."""
    matches = _STEP_LINE_RE.findall(text)
    if not matches:
        raise ParseError("no numbered step lines in decomposition")
    steps = [(int(n), _KIND_MAP[kind], body) for n, kind, body in matches]
    indices = [n for n, _, _ in steps]
    if indices != list(range(1, len(indices) + 1)):
        raise ParseError(f"step indices not contiguous from 1: {indices}")
    return steps


def parse_support(text: str) -> tuple[bool, str]:
    m = _SUPPORT_RE.search(text)
    if not m:
        raise ParseError("no SUPPORTED: yes/no line in verdict")
    rationale = "\n".join(
        line for line in text.splitlines() if not _SUPPORT_RE.match(line)
    ).strip()
    return m.group(1).lower() == "yes", rationale


# -- the loop -----------------------------------------------------------------

class FollowerLoop:
    def __init__(self, cfg: FollowerConfig, latex_cfg: LatexConfig,
                 gateway: Gateway, retriever: Retriever, workbench: Workbench,
                 journal: Journal, work_root: Path):
        self.cfg = cfg
        self.latex_cfg = latex_cfg
        self.gateway = gateway
        self.retriever = retriever
        self.workbench = workbench
        self.journal = journal
        self.work_root = Path(work_root)

    # -- planning -------------------------------------------------------------

    def plan_to_todo(self, proposal_text: str) -> TodoList:
        """Decompose the proposal into a numbered, kind-annotated to-do list."""
        if not proposal_text.strip():
            raise ValueError("proposal text must be non-empty")
        prompt = (
            "Rewrite this research proposal as a to-do list for drafting the "
            "paper section by section. Reply with one line per step, formatted "
            "exactly as '<n>. [draft] <task>' for writing tasks or "
            "'<n>. [code] <task>' for experiment implementation tasks.\n\n"
            + proposal_text
        )
        text = self.gateway.ask("follower.plan.decompose", [("user", prompt)])
        try:
            parsed = parse_decomposition(text)
        except ParseError:
            retry = self.gateway.ask("follower.plan.decompose", [
                ("user", prompt),
                ("user", "Your previous reply had no step lines. Use exactly "
                         "'<n>. [draft] <task>' or '<n>. [code] <task>'."),
            ])
            parsed = parse_decomposition(retry)
        if not (self.cfg.min_steps <= len(parsed) <= self.cfg.max_steps):
            raise ParseError(
                f"decomposition has {len(parsed)} steps, outside "
                f"[{self.cfg.min_steps}, {self.cfg.max_steps}]"
            )
        steps = [PlanStep(index, [body], kind) for index, kind, body in parsed]
        self.journal.mark("plan.created", {
            "steps": [{"index": s.index, "kind": s.kind, "sha": _sha(s.latest)}
                      for s in steps],
        })
        return TodoList(steps)

    # -- observations -----------------------------------------------------------

    def gather_observations(
        self, step: PlanStep, drafts: dict[int, Draft], refs: list[PaperRef],
    ) -> tuple[list[Observation], list[Observation]]:
        """Locate verbatim spans in the draft so far and in the references."""
        origins: dict[str, tuple[str, ...]] = {}
        blocks = []
        for idx in sorted(drafts):
            origin_id = f"section-{idx}"
            lines = tuple(drafts[idx].text.splitlines())
            origins[origin_id] = lines
            blocks.append(self._numbered_block(f"contextual {origin_id}", lines))
        for ref in refs:
            origins[ref.id] = ref.body_lines
            blocks.append(self._numbered_block(
                f"external {ref.id} ({ref.title})", ref.body_lines))
        prompt = (
            "Locate material that supports the step below. Reply with lines "
            "formatted exactly as 'OBSERVATION: contextual <origin> "
            "<start>-<end>' or 'OBSERVATION: external <origin> <start>-<end>' "
            "citing line ranges from the sources, or 'OBSERVATION: none' if "
            "nothing applies.\n\n"
            f"Step:\n{step.latest}\n\n"
            "Sources:\n" + ("\n\n".join(blocks) if blocks else "(no sources)")
        )
        text = self.gateway.ask("follower.observe.locate", [("user", prompt)])
        contextual, external, dropped = self._parse_observations(text, origins)
        if not contextual and not external and not _OBS_NONE_RE.search(text):
            retry = self.gateway.ask("follower.observe.locate", [
                ("user", prompt),
                ("user", "Your previous reply contained no valid OBSERVATION "
                         "lines. Cite only line ranges that exist, or reply "
                         "'OBSERVATION: none'."),
            ])
            contextual, external, retry_dropped = self._parse_observations(
                retry, origins)
            dropped += retry_dropped
        self.journal.mark("observation.gathered", {
            "step": step.index,
            "contextual": [o.to_dict() for o in contextual],
            "external": [o.to_dict() for o in external],
            "dropped": dropped,
        })
        return contextual, external

    @staticmethod
    def _numbered_block(title: str, lines: tuple[str, ...]) -> str:
        body = "\n".join(f"{i}: {line}" for i, line in enumerate(lines, start=1))
        return f"--- {title} ---\n{body or '(empty)'}"

    def _parse_observations(self, text: str, origins: dict[str, tuple[str, ...]]):
        contextual: list[Observation] = []
        external: list[Observation] = []
        dropped: list[dict] = []
        for source, origin_id, lo_s, hi_s in _OBS_LINE_RE.findall(text):
            lo, hi = int(lo_s), int(hi_s)
            lines = origins.get(origin_id)
            if lines is None:
                dropped.append({"origin": origin_id, "span": [lo, hi],
                                "reason": "unknown origin"})
                continue
            if not (1 <= lo <= hi <= len(lines)):
                dropped.append({"origin": origin_id, "span": [lo, hi],
                                "reason": "out of bounds"})
                continue
            if hi - lo + 1 > self.cfg.obs_span_lines_max:
                dropped.append({"origin": origin_id, "span": [lo, hi],
                                "reason": "over line budget"})
                continue
            obs = Observation(source, origin_id, (lo, hi),
                              "\n".join(lines[lo - 1:hi]))
            bucket = contextual if source == "contextual" else external
            cap = (self.cfg.obs_contextual_max if source == "contextual"
                   else self.cfg.obs_external_max)
            if len(bucket) >= cap:
                dropped.append({"origin": origin_id, "span": [lo, hi],
                                "reason": "over count budget"})
                continue
            bucket.append(obs)
        return contextual, external, dropped

    # -- pre-hoc meeting -----------------------------------------------------------

    def prehoc_revise(self, todo: TodoList, step: PlanStep,
                      contextual: list[Observation],
                      external: list[Observation]) -> PlanStep:
        """Revise the active step in light of its observations (or decline)."""
        prompt = (
            "Revise this plan step so it is consistent with the observations. "
            f"If no change is needed, reply with exactly '{NO_CHANGE_MARKER}'. "
            "Otherwise reply with the full revised step text.\n\n"
            f"Step {step.index}:\n{step.latest}\n\n"
            + _render_observations(contextual, external)
        )
        changed = False
        try:
            text = self.gateway.ask("follower.prehoc.revise", [("user", prompt)])
        except EmptyResponse:
            try:
                text = self.gateway.ask("follower.prehoc.revise", [
                    ("user", prompt),
                    ("user", f"Reply with the revised step or '{NO_CHANGE_MARKER}'."),
                ])
            except EmptyResponse:
                self.journal.mark("prehoc.degraded", {
                    "step": step.index, "reason": "empty revision after re-prompt",
                })
                text = NO_CHANGE_MARKER
        if text.strip() != NO_CHANGE_MARKER:
            step.append_version(text)
            changed = True
        todo.round += 1
        self.journal.mark("step.prehoc", {
            "step": step.index, "round": todo.round, "changed": changed,
            "versions": step.version_shas(),
        })
        return step

    # -- execution -------------------------------------------------------------------

    def execute_step(self, step: PlanStep, contextual: list[Observation],
                     external: list[Observation]) -> Draft:
        """Draft the section; code tasks run a workbench session first.

        The drafting context carries only the verbatim observation texts,
        never whole references. The draft then goes through the
        compile-fix loop until clean or the round cap.
        """
        workbench_context = ""
        if step.kind == "code_task":
            instructions = (
                f"Plan step {step.index}: {step.latest}\n\n"
                + _render_observations(contextual, external)
            )
            workdir = self.work_root / f"step_{step.index:02d}"
            session = self.workbench.run_session(instructions, workdir)
            flat = flatten_project(workdir, self.workbench.cfg.ignore_patterns,
                                   session)
            capped, truncated = _cap_text(flat, self.workbench.cfg.flatten_cap_bytes)
            self.journal.mark("workbench.flatten", {
                "step": step.index, "chars": len(capped), "truncated": truncated,
            })
            workbench_context = (
                "\nProject state after the tool session:\n" + capped + "\n"
            )
        prompt = (
            "Draft this paper section as LaTeX source (body only, no "
            "preamble). Ground every claim in the observations given.\n\n"
            f"Step {step.index}:\n{step.latest}\n\n"
            + _render_observations(contextual, external)
            + workbench_context
        )
        try:
            text = self.gateway.ask("follower.execute.draft", [("user", prompt)])
        except EmptyResponse:
            text = self.gateway.ask("follower.execute.draft", [
                ("user", prompt),
                ("user", "Reply with the LaTeX source for the section."),
            ])

        def fixer(source: str, diagnostics) -> str:
            report = "\n".join(d.render() for d in diagnostics)
            return self.gateway.ask("follower.latex.fix", [(
                "user",
                "This LaTeX section does not compile cleanly. Reply with the "
                "full corrected source.\n\n"
                f"Diagnostics:\n{report}\n\nSource:\n{source}",
            )])

        scratch = self.work_root / f"latex_step_{step.index:02d}"
        final, clean, compiles = revise_until_clean(
            text, fixer, self.latex_cfg, self.journal, scratch,
            f"step{step.index}", f"section_{step.index:02d}")
        draft = Draft(step.index, final, "clean" if clean else "dirty")
        self.journal.mark("draft.created", {
            "step": step.index, "sha": _sha(final), "clean": clean,
            "compiles": compiles,
        })
        return draft

    # -- post-hoc meeting ----------------------------------------------------------------

    def posthoc_update(self, todo: TodoList, s: int, draft: Draft,
                       drafts: dict[int, Draft]) -> TodoList:
        """Revise later steps in ascending order; earlier steps must not move.

        Ascending order matters: the revision prompt for step q sees the
        already-revised text of every step between s and q. Executed steps
        stay byte-identical, which is asserted against version snapshots
        taken before the sweep.
        """
        before = todo.snapshot_shas()
        prior = "\n\n".join(
            f"Draft of section {i}:\n{drafts[i].text}" for i in sorted(drafts)
            if i < s
        )
        revised: list[int] = []
        retained: list[int] = []
        for q in range(s + 1, len(todo.steps) + 1):
            step_q = todo.step(q)
            earlier = "\n".join(
                f"{r}. {todo.step(r).latest}" for r in range(1, q))
            prompt = (
                f"Section {s} was just drafted. Revise step {q} of the to-do "
                "list if it is no longer suitable; otherwise reply with "
                f"exactly '{NO_CHANGE_MARKER}'.\n\n"
                f"New draft of section {s}:\n{draft.text}\n\n"
                + (f"{prior}\n\n" if prior else "")
                + f"To-do list so far (steps 1-{q - 1}):\n{earlier}\n\n"
                + f"Step {q} (current):\n{step_q.latest}"
            )
            try:
                text = self.gateway.ask("follower.posthoc.revise", [("user", prompt)])
            except EmptyResponse:
                self.journal.mark("posthoc.degraded", {
                    "step": q, "after": s, "reason": "empty revision",
                })
                retained.append(q)
                continue
            if text.strip() == NO_CHANGE_MARKER:
                retained.append(q)
            else:
                step_q.append_version(text)
                revised.append(q)
        after = todo.snapshot_shas()
        for q in range(1, s + 1):
            if before[q] != after[q]:
                raise AssertionError(
                    f"post-hoc update after step {s} modified executed step {q}")
        self.journal.mark("step.posthoc", {
            "after_step": s, "revised": revised, "retained": retained,
            "versions_before": {str(k): v for k, v in before.items()},
            "versions_after": {str(k): v for k, v in after.items()},
        })
        return todo

    # -- support instrumentation -------------------------------------------------------

    def assess_support(self, todo: TodoList, step: PlanStep,
                       contextual: list[Observation],
                       external: list[Observation], phase: str) -> SupportRecord:
        prompt = (
            "Can the observations below support carrying out this plan step? "
            "Reply with 'SUPPORTED: yes' or 'SUPPORTED: no' on its own line, "
            "followed by a one-line rationale.\n\n"
            f"Step {step.index}:\n{step.latest}\n\n"
            + _render_observations(contextual, external)
        )
        try:
            text = self.gateway.ask("follower.support.assess", [("user", prompt)])
            supported, rationale = parse_support(text)
        except (ParseError, EmptyResponse):
            try:
                retry = self.gateway.ask("follower.support.assess", [
                    ("user", prompt),
                    ("user", "Reply with 'SUPPORTED: yes' or 'SUPPORTED: no' "
                             "plus a rationale."),
                ])
                supported, rationale = parse_support(retry)
            except (ParseError, EmptyResponse):
                supported, rationale = False, "unparseable"
        record = SupportRecord(step.index, phase, todo.round, supported, rationale)
        self.journal.mark("support.record", {
            "step": record.step, "phase": record.phase, "round": record.round,
            "supported": record.supported, "rationale": record.rationale,
        })
        return record

    # -- whole-plan execution -------------------------------------------------------------

    def run(self, proposal_text: str, out_dir: Path) -> dict:
        """Execute every step in order and assemble the final document."""
        todo = self.plan_to_todo(proposal_text)
        drafts: dict[int, Draft] = {}
        for s in range(1, len(todo.steps) + 1):
            step = todo.step(s)
            todo.set_active(s)
            self.journal.mark("step.active", {"step": s, "kind": step.kind})
            if self.cfg.adaptive:
                refs = self._step_refs(step)
                contextual, external = self.gather_observations(step, drafts, refs)
            else:
                contextual, external = [], []
            if self.cfg.adaptive and self.cfg.instrumentation:
                self.assess_support(todo, step, contextual, external, "pre_hoc")
            if self.cfg.adaptive:
                self.prehoc_revise(todo, step, contextual, external)
            draft = self.execute_step(step, contextual, external)
            drafts[s] = draft
            if self.cfg.adaptive:
                self.posthoc_update(todo, s, draft, drafts)
            if self.cfg.adaptive and self.cfg.instrumentation:
                self.assess_support(todo, step, contextual, external, "post_hoc")
            todo.mark_done(s)
            self.journal.mark("step.done", {
                "step": s, "versions": len(step.versions),
                "compile_status": draft.compile_status,
            })
        ordered = [drafts[s].text for s in range(1, len(todo.steps) + 1)]
        info = assemble(ordered, self.latex_cfg, self.journal, out_dir)
        self.journal.mark("follower.done", {
            "sections": len(ordered), "artifact": info["artifact"],
            "clean": info["clean"],
        })
        return info

    def _step_refs(self, step: PlanStep) -> list[PaperRef]:
        try:
            queries = self.retriever.formulate(
                self.gateway, "follower.observe.query", step.latest,
                "follower_external")
        except ParseError:
            self.journal.mark("observation.degraded", {
                "step": step.index, "reason": "query formulation failed",
            })
            return []
        refs: list[PaperRef] = []
        seen: set[str] = set()
        for query in queries:
            for ref in self.retriever.search(query):
                if ref.id not in seen:
                    seen.add(ref.id)
                    refs.append(ref)
        return refs


def _render_observations(contextual: list[Observation],
                         external: list[Observation]) -> str:
    chunks = []
    for label, group in (("Contextual", contextual), ("External", external)):
        for obs in group:
            lo, hi = obs.span
            chunks.append(
                f"{label} observation [{obs.origin_id} lines {lo}-{hi}]:\n{obs.text}")
    return "Observations:\n" + ("\n\n".join(chunks) if chunks else "(none)") + "\n"


def _cap_text(text: str, cap_bytes: int) -> tuple[str, bool]:
    encoded = text.encode("utf-8")
    if len(encoded) <= cap_bytes:
        return text, False
    return encoded[:cap_bytes].decode("utf-8", errors="ignore") + TRUNCATION_MARKER, True


# -- support-rate analysis ------------------------------------------------------

def support_records_from_events(events) -> list[dict]:
    return [dict(ev.payload) for ev in events if ev.type == "support.record"]


def support_rate(records: list[dict], phase: str,
                 indices: list[int] | None = None) -> tuple[list[tuple[int, float]], list[int]]:
    """Supported fraction per step index for one phase, plot-ready.

    Records typically pool several runs' journals. Requested indices with
    no records are omitted from the series and returned separately so the
    caller can flag them.
    """
    phase_records = [r for r in records if r["phase"] == phase]
    by_index: dict[int, list[bool]] = {}
    for r in phase_records:
        by_index.setdefault(int(r["step"]), []).append(bool(r["supported"]))
    if indices is None:
        indices = sorted(by_index)
    series = []
    missing = []
    for idx in indices:
        votes = by_index.get(idx)
        if not votes:
            missing.append(idx)
            continue
        series.append((idx, sum(votes) / len(votes)))
    return series, missing


def render_support_report(records: list[dict]) -> tuple[str, list[dict]]:
    """Two-series table (pre-hoc, post-hoc) plus machine-readable rows."""
    if not records:
        return "(no support records; instrumentation was off)", []
    all_steps = sorted({int(r["step"]) for r in records})
    pre, _ = support_rate(records, "pre_hoc", all_steps)
    post, _ = support_rate(records, "post_hoc", all_steps)
    pre_map, post_map = dict(pre), dict(post)
    lines = ["step  pre_hoc  post_hoc", "----  -------  --------"]
    rows = []
    for idx in all_steps:
        p = pre_map.get(idx)
        q = post_map.get(idx)
        lines.append(
            f"{idx:>4}  {'-' if p is None else format(p, '.3f'):>7}  "
            f"{'-' if q is None else format(q, '.3f'):>8}")
        rows.append({"step": idx, "pre_hoc": p, "post_hoc": q})
    return "\n".join(lines), rows
