"""Double-loop research pipeline.

The leader loop evolves a pool of research proposals under judge-panel
fitness; the follower loop executes the winning proposal step by step with
observation-conditioned re-planning, document compilation, and tool-use
sessions. Everything a run does is recorded in an append-only journal,
which makes runs resumable and scripted replays byte-reproducible.
"""

__version__ = "0.1.0"
