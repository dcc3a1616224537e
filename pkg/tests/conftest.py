from pathlib import Path

import pytest

from dlma.config import RetrievalConfig, WorkbenchConfig
from dlma.gateway import Gateway, Transcript
from dlma.journal import Journal
from dlma.retrieval import PaperRef, Retriever

FIXTURE_DIR = Path(__file__).parent / "fixtures"


@pytest.fixture
def journal(tmp_path):
    j = Journal.create(tmp_path / "journal.jsonl")
    yield j
    j.close()


def scripted_gateway(journal, entries, **kwargs) -> Gateway:
    return Gateway(journal, transcript=Transcript(entries), **kwargs)


def responder_gateway(journal, responder, **kwargs) -> Gateway:
    return Gateway(journal, responder=responder, **kwargs)


SMALL_CORPUS = [
    PaperRef(
        "doc-a",
        "State Space Interpretability Probes",
        "Probing state space models for interpretability.",
        tuple(f"doc-a line {i}" for i in range(1, 11)),
    ),
    PaperRef(
        "doc-b",
        "Convolutional Baselines Revisited",
        "A careful look at convolutional baselines.",
        tuple(f"doc-b line {i}" for i in range(1, 7)),
    ),
    PaperRef(
        "doc-c",
        "Benchmarks For Long Context Evaluation",
        "Evaluation suites for long context models.",
        tuple(f"doc-c line {i}" for i in range(1, 7)),
    ),
]


def fixture_retriever(journal, corpus=None, k=5) -> Retriever:
    cfg = RetrievalConfig(mode="fixture", corpus_dir="", k=k)
    return Retriever(cfg, journal, corpus=corpus or list(SMALL_CORPUS))


@pytest.fixture
def workbench_cfg(tmp_path):
    cfg = WorkbenchConfig()
    cfg.budgets.call_timeout_s = 10.0
    cfg.budgets.wall_s = 60.0
    return cfg
