"""Run configuration: dataclasses plus strict YAML loading.

Unknown keys are rejected so that a typo in a config file fails loudly
instead of silently falling back to a default. Relative paths are resolved
against the directory of the config file they came from.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

REVIEW_FORM_NAMES = ("acl", "iclr", "neurips")


@dataclass
class ProviderConfig:
    mode: str = "scripted"  # live | scripted
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "DLMA_API_KEY"
    transcript_path: str = ""
    temperature: float = 0.3
    max_output_tokens: int = 2048
    max_retries: int = 3


@dataclass
class RetrievalConfig:
    mode: str = "fixture"  # live | fixture
    corpus_dir: str = ""
    endpoint: str = ""
    k: int = 5


@dataclass
class LeaderConfig:
    pool_size: int = 10       # N
    survivors: int = 10       # K
    max_generations: int = 5  # total generations including the seed one
    op_probs: dict[str, float] = field(default_factory=lambda: {
        "involve": 0.10, "improve": 0.30, "integrate": 0.50, "unchanged": 0.10,
    })
    epsilon_conv: float = 0.05
    review_form: str = "acl"           # form driving selection
    stats_forms: list[str] = field(default_factory=lambda: ["acl"])
    refs_per_meeting: int = 5
    queries_max: int = 3


@dataclass
class FollowerConfig:
    adaptive: bool = True          # pre-hoc / post-hoc meetings on
    instrumentation: bool = True   # support-rate judging on
    min_steps: int = 3
    max_steps: int = 16
    obs_contextual_max: int = 5
    obs_external_max: int = 5
    obs_span_lines_max: int = 60


@dataclass
class LatexConfig:
    dry_run: bool = True
    command: list[str] = field(default_factory=lambda: [
        "pdflatex", "-interaction=nonstopmode", "main.tex",
    ])
    timeout_s: float = 120.0
    max_rounds: int = 3
    warnings_dirty: bool = True
    extra_commands: list[str] = field(default_factory=list)


@dataclass
class WorkbenchBudgets:
    wall_s: float = 1200.0
    calls: int = 50
    call_timeout_s: float = 30.0
    output_cap_bytes: int = 65536


@dataclass
class WorkbenchConfig:
    interpreter: str = "python3"
    budgets: WorkbenchBudgets = field(default_factory=WorkbenchBudgets)
    ignore_patterns: list[str] = field(default_factory=lambda: [
        "__pycache__", "*.pyc", ".git",
    ])
    flatten_cap_bytes: int = 65536
    fetch_fixtures: dict[str, str] = field(default_factory=dict)


@dataclass
class RunConfig:
    problem: str = ""           # inline problem text; overrides problem_file
    problem_file: str = ""
    seed: int = 0
    output_dir: str = "runs"
    run_id: str = ""            # derived from content when empty
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    leader: LeaderConfig = field(default_factory=LeaderConfig)
    follower: FollowerConfig = field(default_factory=FollowerConfig)
    latex: LatexConfig = field(default_factory=LatexConfig)
    workbench: WorkbenchConfig = field(default_factory=WorkbenchConfig)

    def problem_text(self) -> str:
        if self.problem:
            return self.problem
        if self.problem_file:
            return Path(self.problem_file).read_text(encoding="utf-8")
        raise ConfigError("config needs either 'problem' or 'problem_file'")

    def validate(self) -> None:
        p = self.provider
        if p.mode not in ("live", "scripted"):
            raise ConfigError(f"provider.mode must be live or scripted, got {p.mode!r}")
        if p.mode == "scripted" and not p.transcript_path:
            raise ConfigError("scripted provider needs provider.transcript_path")
        if p.mode == "live" and not p.endpoint:
            raise ConfigError("live provider needs provider.endpoint")
        if not (0.0 <= p.temperature <= 2.0):
            raise ConfigError("provider.temperature must be in [0, 2]")
        if p.max_output_tokens <= 0:
            raise ConfigError("provider.max_output_tokens must be positive")
        if self.retrieval.mode not in ("live", "fixture"):
            raise ConfigError("retrieval.mode must be live or fixture")
        if self.retrieval.k < 1:
            raise ConfigError("retrieval.k must be >= 1")
        ld = self.leader
        if ld.pool_size < 1:
            raise ConfigError("leader.pool_size must be >= 1")
        if not (1 <= ld.survivors <= 3 * ld.pool_size):
            raise ConfigError("leader.survivors must be in [1, 3 * pool_size]")
        if ld.max_generations < 1:
            raise ConfigError("leader.max_generations must be >= 1")
        if ld.epsilon_conv <= 0:
            raise ConfigError("leader.epsilon_conv must be > 0")
        if set(ld.op_probs) != {"involve", "improve", "integrate", "unchanged"}:
            raise ConfigError("leader.op_probs needs exactly the four operator keys")
        total = sum(ld.op_probs.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"leader.op_probs must sum to 1, got {total}")
        if ld.review_form not in REVIEW_FORM_NAMES:
            raise ConfigError(f"unknown leader.review_form {ld.review_form!r}")
        for f in ld.stats_forms:
            if f not in REVIEW_FORM_NAMES:
                raise ConfigError(f"unknown form {f!r} in leader.stats_forms")
        if ld.review_form not in ld.stats_forms:
            raise ConfigError("leader.review_form must be listed in leader.stats_forms")
        fo = self.follower
        if not (1 <= fo.min_steps <= fo.max_steps):
            raise ConfigError("follower step bounds must satisfy 1 <= min <= max")
        if self.latex.max_rounds < 1:
            raise ConfigError("latex.max_rounds must be >= 1")
        b = self.workbench.budgets
        if b.wall_s <= 0 or b.calls <= 0 or b.call_timeout_s <= 0 or b.output_cap_bytes <= 0:
            raise ConfigError("workbench.budgets values must be positive")


_PATH_FIELDS = {
    ("problem_file",),
    ("output_dir",),
    ("provider", "transcript_path"),
    ("retrieval", "corpus_dir"),
}


def _build(cls: type, data: dict[str, Any], trail: tuple[str, ...]) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping at {'.'.join(trail) or 'top level'}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        where = ".".join(trail) or "top level"
        raise ConfigError(f"unknown config key(s) at {where}: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        nested = _NESTED.get((cls, name))
        if nested is not None:
            kwargs[name] = _build(nested, value, trail + (name,))
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED: dict[tuple[type, str], type] = {
    (RunConfig, "provider"): ProviderConfig,
    (RunConfig, "retrieval"): RetrievalConfig,
    (RunConfig, "leader"): LeaderConfig,
    (RunConfig, "follower"): FollowerConfig,
    (RunConfig, "latex"): LatexConfig,
    (RunConfig, "workbench"): WorkbenchConfig,
    (WorkbenchConfig, "budgets"): WorkbenchBudgets,
}


def _resolve_paths(cfg: RunConfig, base: Path) -> None:
    def absolutize(value: str) -> str:
        if not value:
            return value
        pth = Path(value)
        return str(pth if pth.is_absolute() else (base / pth).resolve())

    cfg.problem_file = absolutize(cfg.problem_file)
    cfg.output_dir = absolutize(cfg.output_dir)
    cfg.provider.transcript_path = absolutize(cfg.provider.transcript_path)
    cfg.retrieval.corpus_dir = absolutize(cfg.retrieval.corpus_dir)
    cfg.workbench.fetch_fixtures = {
        url: absolutize(path) for url, path in cfg.workbench.fetch_fixtures.items()
    }


def load_config(path: str | Path) -> RunConfig:
    """Load, resolve, and validate a YAML run configuration."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is None:
        raw = {}
    cfg = _build(RunConfig, raw, ())
    _resolve_paths(cfg, path.parent.resolve())
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(
        yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=True), encoding="utf-8"
    )


def semantic_digest(cfg: RunConfig, problem_text: str) -> str:
    """Digest of run-defining content: config minus filesystem locations.

    Paths are excluded so that the same run written to a different directory
    keeps the same identity; the problem text itself is included.
    """
    data = dataclasses.asdict(cfg)
    data.pop("output_dir", None)
    data.pop("run_id", None)
    data.pop("problem_file", None)
    data["problem"] = problem_text
    data["provider"].pop("transcript_path", None)
    data["retrieval"].pop("corpus_dir", None)
    data["workbench"].pop("fetch_fixtures", None)
    blob = json.dumps(data, sort_keys=True, ensure_ascii=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def derive_run_id(cfg: RunConfig) -> str:
    if cfg.run_id:
        return cfg.run_id
    return "run-" + semantic_digest(cfg, cfg.problem_text())
