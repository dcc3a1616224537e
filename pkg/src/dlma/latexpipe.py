"""Compile drafts, parse diagnostics, and drive the revise-until-clean loop.

Two compile backends share one diagnostic shape: an external compiler
invoked over a subprocess contract, and a built-in dry-run validator
(brace balance, environment begin/end matching, math-mode delimiter
parity, unknown-command heuristics) for environments without a TeX
installation. Which backend ran is journaled with every compile.

Warnings count as dirty by default: the revision loop runs until there are
no errors or warnings, or the round cap is reached.
"""

from __future__ import annotations

import re
import shutil
import subprocess
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .config import LatexConfig
from .errors import CompileUnavailable
from .journal import Journal


@dataclass(frozen=True)
class Diagnostic:
    severity: str          # error | warning
    file: str
    line: int | None
    message: str

    def to_dict(self) -> dict:
        return {"severity": self.severity, "file": self.file,
                "line": self.line, "message": self.message}

    @classmethod
    def from_dict(cls, d: dict) -> "Diagnostic":
        return cls(d["severity"], d["file"], d.get("line"), d["message"])

    def render(self) -> str:
        loc = f"{self.file}:{self.line}" if self.line is not None else self.file
        return f"[{self.severity}] {loc}: {self.message}"


@dataclass
class CompileResult:
    status: str            # clean | diagnostics
    diagnostics: list[Diagnostic] = field(default_factory=list)
    raw_log: str = ""

    @property
    def clean(self) -> bool:
        return self.status == "clean"

    def is_dirty(self, warnings_dirty: bool = True) -> bool:
        if warnings_dirty:
            return bool(self.diagnostics)
        return any(d.severity == "error" for d in self.diagnostics)


# -- dry-run validator ----------------------------------------------------

KNOWN_COMMANDS = {
    "documentclass", "usepackage", "begin", "end", "input", "include",
    "section", "subsection", "subsubsection", "paragraph", "title",
    "author", "date", "maketitle", "tableofcontents", "appendix",
    "textbf", "textit", "texttt", "textsc", "emph", "underline",
    "item", "label", "ref", "eqref", "pageref", "cite", "citep", "citet",
    "footnote", "caption", "centering", "includegraphics", "hline",
    "toprule", "midrule", "bottomrule", "newline", "par", "noindent",
    "vspace", "hspace", "quad", "qquad", "small", "large", "Large",
    "frac", "sqrt", "sum", "prod", "int", "lim", "log", "exp", "min",
    "max", "arg", "text", "mathbf", "mathit", "mathrm", "mathcal",
    "mathbb", "left", "right", "cdot", "cdots", "dots", "ldots", "times",
    "leq", "geq", "neq", "approx", "sim", "pm", "infty", "partial",
    "nabla", "alpha", "beta", "gamma", "delta", "epsilon", "varepsilon",
    "zeta", "eta", "theta", "lambda", "mu", "nu", "xi", "pi", "rho",
    "sigma", "tau", "phi", "varphi", "chi", "psi", "omega", "Gamma",
    "Delta", "Theta", "Lambda", "Xi", "Pi", "Sigma", "Phi", "Psi",
    "Omega", "in", "subset", "subseteq", "cup", "cap", "mid", "to",
    "rightarrow", "leftarrow", "Rightarrow", "mapsto", "hat", "bar",
    "tilde", "vec", "top", "bottom", "prime", "circ", "star",
}

_COMMAND_RE = re.compile(r"\\([a-zA-Z]+|.)")
_BEGIN_END_RE = re.compile(r"\\(begin|end)\{([^}]*)\}")


def _strip_comments(line: str) -> str:
    out = []
    i = 0
    while i < len(line):
        ch = line[i]
        if ch == "\\" and i + 1 < len(line):
            out.append(line[i:i + 2])
            i += 2
            continue
        if ch == "%":
            break
        out.append(ch)
        i += 1
    return "".join(out)


def validate_source(text: str, filename: str,
                    extra_commands: tuple[str, ...] = ()) -> list[Diagnostic]:
    """Deterministic syntax screening of one source file."""
    known = KNOWN_COMMANDS | set(extra_commands)
    diags: list[Diagnostic] = []
    env_stack: list[tuple[str, int]] = []
    brace_depth = 0
    dollar_count = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comments(raw)
        i = 0
        while i < len(line):
            ch = line[i]
            if ch == "\\" and i + 1 < len(line):
                m = _COMMAND_RE.match(line, i)
                name = m.group(1)
                if name.isalpha() and name not in known:
                    diags.append(Diagnostic(
                        "warning", filename, lineno,
                        f"Unknown command \\{name}",
                    ))
                i = m.end()
                continue
            if ch == "{":
                brace_depth += 1
            elif ch == "}":
                brace_depth -= 1
                if brace_depth < 0:
                    diags.append(Diagnostic(
                        "error", filename, lineno, "Unmatched closing brace"))
                    brace_depth = 0
            elif ch == "$":
                dollar_count += 1
            i += 1
        for m in _BEGIN_END_RE.finditer(line):
            kind, env = m.group(1), m.group(2)
            if kind == "begin":
                env_stack.append((env, lineno))
            else:
                if not env_stack:
                    diags.append(Diagnostic(
                        "error", filename, lineno,
                        f"\\end{{{env}}} without matching \\begin"))
                else:
                    opened, _ = env_stack.pop()
                    if opened != env:
                        diags.append(Diagnostic(
                            "error", filename, lineno,
                            f"\\end{{{env}}} does not match \\begin{{{opened}}}"))
    for env, lineno in env_stack:
        diags.append(Diagnostic(
            "error", filename, lineno, f"\\begin{{{env}}} never closed"))
    if brace_depth > 0:
        diags.append(Diagnostic(
            "error", filename, None, f"{brace_depth} unclosed brace(s)"))
    if dollar_count % 2 != 0:
        diags.append(Diagnostic(
            "error", filename, None, "Unbalanced math-mode $ delimiters"))
    return diags


_INPUT_RE = re.compile(r"\\(?:input|include)\{([^}]+)\}")


def project_files(project_dir: Path) -> list[Path]:
    """main.tex plus the files it inputs, in inclusion order."""
    main = project_dir / "main.tex"
    files = [main]
    for name in _INPUT_RE.findall(main.read_text(encoding="utf-8")):
        if not name.endswith(".tex"):
            name += ".tex"
        files.append(project_dir / name)
    return files


def dry_run_validate(project_dir: Path,
                     extra_commands: tuple[str, ...] = ()) -> CompileResult:
    diags: list[Diagnostic] = []
    log_lines = [f"Dry-run validator over {len(project_files(project_dir))} file(s)"]
    for path in project_files(project_dir):
        if not path.exists():
            diags.append(Diagnostic("error", path.name, None, "missing input file"))
            continue
        file_diags = validate_source(path.read_text(encoding="utf-8"), path.name,
                                     extra_commands)
        diags.extend(file_diags)
        log_lines.extend(d.render() for d in file_diags)
    status = "clean" if not diags else "diagnostics"
    return CompileResult(status, diags, "\n".join(log_lines))


# -- external compiler log parsing ----------------------------------------

_OPEN_FILE_RE = re.compile(r"\.?/?[^\s()]+\.tex")
_ERROR_LINE_RE = re.compile(r"^!\s?(.*)$")
_ERROR_LOC_RE = re.compile(r"^l\.(\d+)")
_WARNING_RE = re.compile(r"^(?:LaTeX|Package \S+) Warning:\s*(.*)$")
_WARNING_LINE_NO_RE = re.compile(r"on input line (\d+)")


def _track_parens(line: str, stack: list[str | None]) -> None:
    """Advance the compiler's file-nesting stack over one log line.

    `None` entries mark parentheses that did not open a file, so a `)`
    always pops the paren it belongs to.
    """
    i = 0
    while i < len(line):
        ch = line[i]
        if ch == "(":
            m = _OPEN_FILE_RE.match(line, i + 1)
            stack.append(Path(m.group(0)).name if m else None)
            i = m.end() if m else i + 1
        elif ch == ")":
            if stack:
                stack.pop()
            i += 1
        else:
            i += 1


def parse_compiler_log(text: str) -> list[Diagnostic]:
    """Extract error/warning diagnostics from a TeX compiler log.

    File attribution follows the compiler's parenthesis nesting; an error's
    source line comes from the `l.<n>` locator that follows it. Pure
    function of the log text.
    """
    diags: list[Diagnostic] = []
    stack: list[str | None] = []
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        err = _ERROR_LINE_RE.match(line)
        if err:
            message = err.group(1).strip()
            current = next((f for f in reversed(stack) if f), "main.tex")
            line_no = None
            j = i + 1
            while j < len(lines) and j - i < 8:
                loc = _ERROR_LOC_RE.match(lines[j])
                if loc:
                    line_no = int(loc.group(1))
                    break
                if not lines[j].strip():
                    break
                j += 1
            diags.append(Diagnostic("error", current, line_no, message))
            i += 1
            continue
        warn = _WARNING_RE.match(line)
        if warn:
            message = warn.group(1).strip()
            current = next((f for f in reversed(stack) if f), "main.tex")
            j = i
            while not message.endswith(".") and j + 1 < len(lines) and lines[j + 1].strip():
                j += 1
                message += " " + lines[j].strip()
            loc = _WARNING_LINE_NO_RE.search(message)
            line_no = int(loc.group(1)) if loc else None
            diags.append(Diagnostic("warning", current, line_no, message))
            i = j + 1
            continue
        _track_parens(line, stack)
        i += 1
    return diags


def run_external_compiler(project_dir: Path, cfg: LatexConfig) -> CompileResult:
    binary = cfg.command[0]
    if shutil.which(binary) is None:
        raise CompileUnavailable(
            f"compiler {binary!r} not found and latex.dry_run is disabled")
    proc = subprocess.run(
        cfg.command, cwd=project_dir, capture_output=True, text=True,
        timeout=cfg.timeout_s,
    )
    log_path = project_dir / (Path(cfg.command[-1]).stem + ".log")
    raw = log_path.read_text(errors="replace") if log_path.exists() \
        else proc.stdout + proc.stderr
    diags = parse_compiler_log(raw)
    if proc.returncode != 0 and not any(d.severity == "error" for d in diags):
        diags.append(Diagnostic("error", "main.tex", None,
                                f"compiler exited with status {proc.returncode}"))
    status = "clean" if not diags else "diagnostics"
    return CompileResult(status, diags, raw)


# -- journaled compile and the fix loop ------------------------------------

def compile_project(project_dir: Path, cfg: LatexConfig, journal: Journal,
                    label: str) -> CompileResult:
    """One compile of a project directory, journaled as a compile.run event."""

    def compute():
        started = time.monotonic()
        if cfg.dry_run:
            result = dry_run_validate(project_dir, tuple(cfg.extra_commands))
            mode = "dry_run"
        else:
            result = run_external_compiler(project_dir, cfg)
            mode = "external"
        payload = {
            "label": label,
            "mode": mode,
            "status": result.status,
            "diagnostics": [d.to_dict() for d in result.diagnostics],
        }
        volatile = {
            "duration_s": time.monotonic() - started,
            "raw_log": result.raw_log,
        }
        return payload, volatile

    payload = journal.record("compile.run", compute)
    return CompileResult(
        payload["status"],
        [Diagnostic.from_dict(d) for d in payload["diagnostics"]],
    )


def write_scratch_project(scratch_dir: Path, section_name: str, source: str) -> None:
    scratch_dir.mkdir(parents=True, exist_ok=True)
    skeleton = resources.files("dlma").joinpath("assets/latex_skeleton/main.tex")
    main = skeleton.read_text(encoding="utf-8").replace(
        "%%SECTIONS%%", f"\\input{{{section_name}}}")
    (scratch_dir / "main.tex").write_text(main, encoding="utf-8")
    (scratch_dir / f"{section_name}.tex").write_text(source, encoding="utf-8")


def revise_until_clean(source: str, fixer, cfg: LatexConfig, journal: Journal,
                       scratch_dir: Path, label: str,
                       section_name: str = "section") -> tuple[str, bool, int]:
    """Compile-fix loop: at most cfg.max_rounds revisions, max_rounds+1 compiles.

    `fixer(source, diagnostics) -> str` produces the revised source (the
    caller wires it to a prompted revision). Returns (final_source,
    clean, compiles_performed).
    """
    if cfg.max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    compiles = 0
    current = source
    for round_no in range(cfg.max_rounds + 1):
        write_scratch_project(scratch_dir, section_name, current)
        result = compile_project(scratch_dir, cfg, journal,
                                 f"{label}.round{round_no}")
        compiles += 1
        if not result.is_dirty(cfg.warnings_dirty):
            return current, True, compiles
        if round_no == cfg.max_rounds:
            break
        current = fixer(current, result.diagnostics)
    return current, False, compiles


def assemble(drafts: list[str], cfg: LatexConfig, journal: Journal,
             out_dir: Path) -> dict:
    """Write section files into the skeleton, compile, return artifact info.

    Sections land as section_01.tex .. section_NN.tex in draft order; the
    concatenation of those files reproduces the drafts byte-for-byte. The
    same concatenation is written to paper_source.tex for single-file
    consumers.
    """
    if not drafts:
        raise ValueError("nothing to assemble")
    missing = [i for i, d in enumerate(drafts, start=1) if not d]
    if missing:
        raise ValueError(f"draft(s) missing for section(s) {missing}")
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [f"section_{i:02d}" for i in range(1, len(drafts) + 1)]
    for name, source in zip(names, drafts):
        (out_dir / f"{name}.tex").write_text(source, encoding="utf-8")
    skeleton = resources.files("dlma").joinpath("assets/latex_skeleton/main.tex")
    inputs = "\n".join(f"\\input{{{name}}}" for name in names)
    (out_dir / "main.tex").write_text(
        skeleton.read_text(encoding="utf-8").replace("%%SECTIONS%%", inputs),
        encoding="utf-8",
    )
    (out_dir / "paper_source.tex").write_text("".join(drafts), encoding="utf-8")
    result = compile_project(out_dir, cfg, journal, "assemble")
    artifact = "main.pdf" if (not cfg.dry_run and result.clean) else "paper_source.tex"
    return {
        "dir": str(out_dir),
        "artifact": artifact,
        "sections": [f"{n}.tex" for n in names],
        "clean": result.clean,
        "diagnostics": [d.to_dict() for d in result.diagnostics],
    }
