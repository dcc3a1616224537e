"""Evolutionary search over a pool of research proposals.

Each generation, every pool member draws one operator from the configured
categorical distribution: an involvement meeting creates a fresh proposal
from retrieved references, an improvement meeting revises the member after
a weakness reflection, an integration meeting folds the strengths of two
members into each other (producing two offspring), or the member stays
unchanged. Offspring are unioned with the current pool, everything
unscored is judged by the review panel, and the top K candidates survive
under a deterministic total order:

    rating desc, secondary criterion desc, tertiary criterion desc,
    younger generation first, lexicographic id.

Because the union always contains the current pool and K >= 1, the maximum
rating never decreases across generations; the loop halts when that
maximum improves by less than epsilon (checked from the third generation
on) or at the generation cap, and the highest-rated member of the final
pool is the winner.

Operator failures are journaled and degrade the member to "unchanged" for
that generation; a single bad meeting never kills a run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from fractions import Fraction

from .config import LeaderConfig
from .errors import (
    DlmaError,
    EmptyResponse,
    MeetingFailure,
    OutOfRangeScore,
    ParseError,
    TransportError,
)
from .gateway import Gateway
from .journal import Journal, JournaledRandom
from .retrieval import PaperRef, Retriever
from .review import ReviewPanel, ordering_scores

OPERATORS = ("involve", "improve", "integrate", "unchanged")
LINEAGE_OPS = OPERATORS[:3] + ("seed-unchanged",)

# Failures that degrade one meeting to "unchanged" instead of killing the
# run. Journal corruption and transcript exhaustion stay fatal.
OPERATOR_FAILURES = (MeetingFailure, ParseError, EmptyResponse, OutOfRangeScore,
                     TransportError)


def content_hash(text: str) -> str:
    return hashlib.sha256(text.strip().encode("utf-8")).hexdigest()[:16]


@dataclass
class Proposal:
    id: str
    content: str
    generation_born: int
    lineage_op: str                 # involve | improve | integrate | seed-unchanged
    parents: tuple[str, ...] = ()

    def __post_init__(self):
        if self.lineage_op not in LINEAGE_OPS:
            raise ValueError(f"unknown lineage operator {self.lineage_op!r}")

    @property
    def content_sha(self) -> str:
        return content_hash(self.content)


@dataclass(frozen=True)
class ScoreCard:
    """Per-form judge outcome used for ordering: headline plus tie-breaks."""
    rating: Fraction
    secondary: Fraction
    tertiary: Fraction


@dataclass
class GenerationStats:
    generation: int
    forms: dict[str, dict[str, Fraction]]  # form -> {min, mean, max}
    count: int

    def to_payload(self) -> dict:
        return {
            "generation": self.generation,
            "count": self.count,
            "forms": {
                f: {k: str(v) for k, v in vals.items()}
                for f, vals in self.forms.items()
            },
        }


@dataclass
class ProposalPool:
    generation: int
    members: list[Proposal]
    stats: GenerationStats | None = None


def survivor_sort_key(p: Proposal, card: ScoreCard):
    """The documented total order, as a sort key (best first under sorted())."""
    return (-card.rating, -card.secondary, -card.tertiary, -p.generation_born, p.id)


def select_top_k(candidates: list[tuple[Proposal, ScoreCard]], k: int) -> list[Proposal]:
    ranked = sorted(candidates, key=lambda pair: survivor_sort_key(*pair))
    return [p for p, _ in ranked[:min(k, len(ranked))]]


def should_halt(max_history: list[Fraction], epsilon: float) -> bool:
    """Convergence rule over per-generation maximum ratings.

    Applies from the third generation on: halt when the latest improvement
    falls below epsilon. With fewer than three generations there is nothing
    to compare against yet.
    """
    g = len(max_history) - 1
    if g < 2:
        return False
    return float(max_history[-1] - max_history[-2]) < epsilon


class LeaderLoop:
    def __init__(self, cfg: LeaderConfig, gateway: Gateway, retriever: Retriever,
                 panel: ReviewPanel, journal: Journal, rng: JournaledRandom):
        self.cfg = cfg
        self.gateway = gateway
        self.retriever = retriever
        self.panel = panel
        self.journal = journal
        self.rng = rng
        self._id_counter = 0
        self._cards: dict[tuple[str, str], ScoreCard] = {}  # (content_sha, form)

    # -- proposal construction -------------------------------------------

    def _new_id(self) -> str:
        self._id_counter += 1
        return f"p{self._id_counter:04d}"

    def _register(self, proposal: Proposal) -> Proposal:
        self.journal.mark("proposal.created", {
            "id": proposal.id,
            "op": proposal.lineage_op,
            "parents": list(proposal.parents),
            "generation_born": proposal.generation_born,
            "content_sha": proposal.content_sha,
        })
        return proposal

    def _fetch_refs(self, tag: str, context: str, origin: str) -> list[PaperRef]:
        queries = self.retriever.formulate(
            self.gateway, tag, context, origin, self.cfg.queries_max)
        refs: list[PaperRef] = []
        seen: set[str] = set()
        for query in queries:
            for ref in self.retriever.search(query):
                if ref.id not in seen:
                    seen.add(ref.id)
                    refs.append(ref)
        return refs[:self.cfg.refs_per_meeting]

    def involve(self, problem: str, generation: int = 0) -> Proposal:
        """Involvement meeting: a new proposal from the reference literature."""
        if not problem.strip():
            raise ValueError("problem statement must be non-empty")
        refs = self._fetch_refs("leader.involve.query", problem, "involvement")
        ref_digest = "\n".join(f"- [{r.id}] {r.title}: {r.abstract}" for r in refs)
        prompt = (
            "Research problem:\n"
            f"{problem}\n\n"
            "Relevant references:\n"
            f"{ref_digest or '- (none found)'}\n\n"
            "Write a research proposal with these sections: Title, Problem "
            "Restatement, Method Plan, Experiment Plan."
        )
        content = self.gateway.ask("leader.involve.generate", [("user", prompt)])
        return self._register(Proposal(self._new_id(), content, generation, "involve"))

    def improve(self, parent: Proposal, generation: int) -> Proposal:
        """Improvement meeting: reflect on weaknesses, search, revise."""
        weaknesses = self.gateway.ask("leader.improve.reflect", [(
            "user",
            "Identify the key weaknesses of this research proposal:\n\n"
            + parent.content,
        )])
        refs = self._fetch_refs(
            "leader.improve.query",
            f"{parent.content}\n\nIdentified weaknesses:\n{weaknesses}",
            "improvement",
        )
        ref_digest = "\n".join(f"- [{r.id}] {r.title}: {r.abstract}" for r in refs)
        revision = self.gateway.ask("leader.improve.revise", [(
            "user",
            "Revise the proposal below to address its weaknesses.\n\n"
            f"Proposal:\n{parent.content}\n\n"
            f"Weaknesses:\n{weaknesses}\n\n"
            f"Supporting references:\n{ref_digest or '- (none found)'}\n\n"
            "Reply with the full revised proposal (Title, Problem Restatement, "
            "Method Plan, Experiment Plan).",
        )])
        return self._register(Proposal(
            self._new_id(), revision, generation, "improve", (parent.id,)))

    def integrate(self, a: Proposal, b: Proposal,
                  generation: int) -> tuple[Proposal, Proposal]:
        """Integration meeting: two offspring, each folding in the other's strengths."""
        if a.id == b.id:
            raise ValueError("integration needs two distinct proposals")
        strengths = self.gateway.ask("leader.integrate.strengths", [(
            "user",
            "Analyze the individual strengths of each proposal.\n\n"
            f"Proposal A ({a.id}):\n{a.content}\n\n"
            f"Proposal B ({b.id}):\n{b.content}",
        )])
        children = []
        for base, donor in ((a, b), (b, a)):
            merged = self.gateway.ask("leader.integrate.generate", [(
                "user",
                f"Integrate the strengths of proposal {donor.id} into proposal "
                f"{base.id}, keeping {base.id}'s core approach.\n\n"
                f"Base proposal ({base.id}):\n{base.content}\n\n"
                f"Donor proposal ({donor.id}):\n{donor.content}\n\n"
                f"Strength analysis:\n{strengths}\n\n"
                "Reply with the full integrated proposal (Title, Problem "
                "Restatement, Method Plan, Experiment Plan).",
            )])
            children.append(self._register(Proposal(
                self._new_id(), merged, generation, "integrate",
                (base.id, donor.id))))
        return children[0], children[1]

    # -- scoring -----------------------------------------------------------

    def _stats(self, generation: int,
               scored: list[tuple[Proposal, dict[str, ScoreCard]]]) -> GenerationStats:
        forms: dict[str, dict[str, Fraction]] = {}
        for form in self.cfg.stats_forms:
            ratings = [cards[form].rating for _, cards in scored if form in cards]
            if not ratings:
                continue
            forms[form] = {
                "min": min(ratings),
                "mean": sum(ratings) / len(ratings),
                "max": max(ratings),
            }
        return GenerationStats(generation, forms, len(scored))

    def _score_candidates(self, candidates: list[Proposal], generation: int):
        """Judge candidates under every stats form, caching by content hash.

        Clones and carried-over survivors never pay a second judge call; a
        scored marker is still journaled every generation so stats can be
        recomputed from the journal alone. A candidate whose review fails
        even after the re-prompt is dropped from the generation, journaled.
        """
        scored: list[tuple[Proposal, dict[str, ScoreCard]]] = []
        for proposal in candidates:
            cards: dict[str, ScoreCard] = {}
            ok = True
            for form in self.cfg.stats_forms:
                card = self._score_one_form(proposal, generation, form)
                if card is None:
                    ok = False
                    break
                cards[form] = card
            if ok:
                scored.append((proposal, cards))
        return scored

    def _score_one_form(self, proposal: Proposal, generation: int,
                        form: str) -> ScoreCard | None:
        key = (proposal.content_sha, form)
        cached = key in self._cards
        if not cached:
            try:
                rev = self.panel.review(
                    proposal.content, form,
                    artifact_id=proposal.id, tag_prefix="leader.")
            except (ParseError, OutOfRangeScore) as exc:
                self.journal.mark("score.failed", {
                    "generation": generation, "proposal": proposal.id,
                    "form": form, "error": str(exc),
                })
                return None
            rating, secondary, tertiary = ordering_scores(rev)
            self._cards[key] = ScoreCard(rating, secondary, tertiary)
        card = self._cards[key]
        self.journal.mark("proposal.scored", {
            "generation": generation,
            "proposal": proposal.id,
            "form": form,
            "rating": str(card.rating),
            "secondary": str(card.secondary),
            "tertiary": str(card.tertiary),
            "content_sha": proposal.content_sha,
            "cached": cached,
        })
        return card

    # -- generational step ---------------------------------------------------

    def step_generation(self, pool: ProposalPool, problem: str) -> ProposalPool:
        """One evolution step: operator draws, offspring, scoring, selection."""
        generation = pool.generation + 1
        offspring: list[Proposal] = []
        for member in pool.members:
            op = self.rng.categorical(
                f"operator.g{generation}.{member.id}", self.cfg.op_probs)
            try:
                created: list[Proposal] = []
                if op == "involve":
                    created = [self.involve(problem, generation)]
                elif op == "improve":
                    created = [self.improve(member, generation)]
                elif op == "integrate":
                    others = [m for m in pool.members if m.id != member.id]
                    if not others:
                        raise MeetingFailure("no integration partner in singleton pool")
                    partner = others[self.rng.index(
                        f"partner.g{generation}.{member.id}", len(others))]
                    created = list(self.integrate(member, partner, generation))
                self.journal.mark("operator.applied", {
                    "generation": generation, "member": member.id, "op": op,
                    "offspring": [c.id for c in created],
                })
                offspring.extend(created)
            except OPERATOR_FAILURES as exc:
                self.journal.mark("operator.degraded", {
                    "generation": generation, "member": member.id, "op": op,
                    "error": str(exc),
                })
        union = pool.members + offspring
        deduped: list[Proposal] = []
        seen: set[str] = set()
        for proposal in union:
            if proposal.content_sha in seen:
                self.journal.mark("proposal.duplicate", {
                    "generation": generation, "proposal": proposal.id,
                    "content_sha": proposal.content_sha,
                })
                continue
            seen.add(proposal.content_sha)
            deduped.append(proposal)
        scored = self._score_candidates(deduped, generation)
        stats = self._stats(generation, scored)
        self.journal.mark("generation.stats", stats.to_payload())
        selection_form = self.cfg.review_form
        survivors = select_top_k(
            [(p, cards[selection_form]) for p, cards in scored],
            self.cfg.survivors,
        )
        self.journal.mark("selection.applied", {
            "generation": generation,
            "candidates": len(scored),
            "survivors": [p.id for p in survivors],
        })
        return ProposalPool(generation, survivors, stats)

    # -- full loop -------------------------------------------------------------

    def seed_pool(self, problem: str) -> ProposalPool:
        """Generation zero: the pool is initialized by involvement meetings only."""
        members: list[Proposal] = []
        seen: set[str] = set()
        for _ in range(self.cfg.pool_size):
            proposal = self.involve(problem, 0)
            if proposal.content_sha in seen:
                self.journal.mark("proposal.duplicate", {
                    "generation": 0, "proposal": proposal.id,
                    "content_sha": proposal.content_sha,
                })
                continue
            seen.add(proposal.content_sha)
            members.append(proposal)
        scored = self._score_candidates(members, 0)
        stats = self._stats(0, scored)
        self.journal.mark("generation.stats", stats.to_payload())
        members = select_top_k(
            [(p, cards[self.cfg.review_form]) for p, cards in scored],
            self.cfg.survivors,
        )
        self.journal.mark("selection.applied", {
            "generation": 0, "candidates": len(scored),
            "survivors": [p.id for p in members],
        })
        return ProposalPool(0, members, stats)

    def run(self, problem: str) -> tuple[Proposal, list[GenerationStats]]:
        """Seed, evolve until convergence or the cap, return the argmax member."""
        self.journal.mark("leader.start", {
            "pool_size": self.cfg.pool_size,
            "survivors": self.cfg.survivors,
            "max_generations": self.cfg.max_generations,
            "form": self.cfg.review_form,
        })
        pool = self.seed_pool(problem)
        history: list[GenerationStats] = [pool.stats]
        max_history = [pool.stats.forms[self.cfg.review_form]["max"]]
        prev_max = max_history[0]
        while pool.generation + 1 < self.cfg.max_generations:
            pool = self.step_generation(pool, problem)
            history.append(pool.stats)
            new_max = pool.stats.forms[self.cfg.review_form]["max"]
            if new_max < prev_max:
                raise DlmaError(
                    f"elitism violated: max rating fell from {prev_max} to "
                    f"{new_max} at generation {pool.generation}"
                )
            prev_max = new_max
            max_history.append(new_max)
            if should_halt(max_history, self.cfg.epsilon_conv):
                self.journal.mark("leader.converged", {
                    "generation": pool.generation,
                    "improvement": str(max_history[-1] - max_history[-2]),
                    "epsilon": self.cfg.epsilon_conv,
                })
                break
        best = self._argmax(pool)
        self.journal.mark("leader.done", {
            "best": best.id, "generations": pool.generation + 1,
            "content_sha": best.content_sha,
        })
        return best, history

    def _argmax(self, pool: ProposalPool) -> Proposal:
        form = self.cfg.review_form
        pairs = [(p, self._cards[(p.content_sha, form)]) for p in pool.members]
        return select_top_k(pairs, 1)[0]


# -- reporting ----------------------------------------------------------------

def stats_from_events(events) -> list[GenerationStats]:
    out = []
    for ev in events:
        if ev.type != "generation.stats":
            continue
        forms = {
            f: {k: Fraction(v) for k, v in vals.items()}
            for f, vals in ev.payload["forms"].items()
        }
        out.append(GenerationStats(ev.payload["generation"], forms,
                                   ev.payload["count"]))
    return out


def recompute_stats_from_scores(events) -> list[GenerationStats]:
    """Independent recomputation of per-generation stats from scored markers."""
    buckets: dict[int, dict[str, list[Fraction]]] = {}
    for ev in events:
        if ev.type != "proposal.scored":
            continue
        g = ev.payload["generation"]
        form = ev.payload["form"]
        buckets.setdefault(g, {}).setdefault(form, []).append(
            Fraction(ev.payload["rating"]))
    out = []
    for g in sorted(buckets):
        forms = {}
        count = 0
        for form, ratings in buckets[g].items():
            forms[form] = {
                "min": min(ratings),
                "mean": sum(ratings) / len(ratings),
                "max": max(ratings),
            }
            count = max(count, len(ratings))
        out.append(GenerationStats(g, forms, count))
    return out


def render_generation_report(stats: list[GenerationStats],
                             forms: list[str] | None = None) -> tuple[str, list[dict]]:
    """Aligned text table plus machine-readable rows, one row per generation.

    Generations display 1-based to match the conventional presentation of
    per-generation score trajectories.
    """
    if not stats:
        return "(no generation statistics recorded)", []
    if forms is None:
        seen: list[str] = []
        for st in stats:
            for form in st.forms:
                if form not in seen:
                    seen.append(form)
        forms = seen
    header = ["Generation"]
    for form in forms:
        label = form.upper()
        header += [f"{label} Min", f"{label} Mean", f"{label} Max"]
    rows_text = [header]
    rows_data = []
    for st in stats:
        row = [str(st.generation + 1)]
        data = {"generation": st.generation + 1, "count": st.count}
        for form in forms:
            vals = st.forms.get(form)
            if vals is None:
                row += ["-", "-", "-"]
                continue
            row += [f"{float(vals[k]):.2f}" for k in ("min", "mean", "max")]
            data[form] = {k: float(vals[k]) for k in ("min", "mean", "max")}
        rows_text.append(row)
        rows_data.append(data)
    widths = [max(len(r[i]) for r in rows_text) for i in range(len(header))]
    lines = []
    for idx, row in enumerate(rows_text):
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
        if idx == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines), rows_data
