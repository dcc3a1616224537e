"""Tool-use sessions for code tasks, sandboxed to a working directory.

The session loop prompts the model with the task instructions plus a tail
of the session so far; each reply must contain exactly one fenced tool
block:

    ```tool
    tool: shell_exec
    command: echo hi > notes.txt
    ```

Tools: shell_exec {command}, script_run {path, args}, file_read_page
{path, page}, web_fetch_stub {url}, terminate {reason}. Unparseable
replies append an error result and the loop continues; three consecutive
parse failures end the session with the call-limit reason.

Path arguments and path-looking tokens in shell commands must resolve
inside the working directory; anything else is rejected with a sandbox
error result rather than dispatched.
"""

from __future__ import annotations

import fnmatch
import re
import shlex
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

from .config import WorkbenchConfig
from .errors import SandboxViolation
from .gateway import Gateway
from .journal import Journal

TOOLS = ("shell_exec", "script_run", "file_read_page", "web_fetch_stub", "terminate")
TRUNCATION_MARKER = "\n...[output truncated]"


@dataclass(frozen=True)
class ToolCall:
    tool: str
    arguments: dict[str, str]

    def to_dict(self) -> dict:
        return {"tool": self.tool, "arguments": dict(self.arguments)}


@dataclass
class ToolResult:
    ok: bool
    output: str
    exit_status: int | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "output": self.output,
                "exit_status": self.exit_status, "meta": self.meta}


@dataclass
class SessionLog:
    entries: list[tuple[ToolCall, ToolResult]] = field(default_factory=list)
    termination_reason: str = ""   # model_terminated | time_limit | call_limit

    def render(self) -> str:
        lines = []
        for idx, (call, result) in enumerate(self.entries, start=1):
            args = " ".join(f"{k}={v!r}" for k, v in sorted(call.arguments.items()))
            lines.append(f"[{idx}] {call.tool} {args}".rstrip())
            status = "ok" if result.ok else "error"
            exit_part = "" if result.exit_status is None else f" exit={result.exit_status}"
            lines.append(f"    -> {status}{exit_part}")
            for out_line in result.output.splitlines():
                lines.append(f"    {out_line}")
        lines.append(f"termination: {self.termination_reason}")
        return "\n".join(lines)


# -- parsing ---------------------------------------------------------------

_TOOL_BLOCK_RE = re.compile(r"```tool\s*\n(.*?)```", re.DOTALL)


def parse_tool_call(text: str) -> ToolCall:
    m = _TOOL_BLOCK_RE.search(text)
    if not m:
        raise ValueError("no ```tool block in response")
    fields: dict[str, str] = {}
    for raw in m.group(1).splitlines():
        if not raw.strip():
            continue
        key, colon, value = raw.partition(":")
        if not colon:
            raise ValueError(f"bad tool-block line: {raw!r}")
        fields[key.strip()] = value.strip()
    tool = fields.pop("tool", "")
    if tool not in TOOLS:
        raise ValueError(f"unknown tool {tool!r}")
    required = {
        "shell_exec": {"command"},
        "script_run": {"path"},
        "file_read_page": {"path", "page"},
        "web_fetch_stub": {"url"},
        "terminate": set(),
    }[tool]
    missing = required - set(fields)
    if missing:
        raise ValueError(f"{tool} missing argument(s): {sorted(missing)}")
    return ToolCall(tool, fields)


# -- sandbox ---------------------------------------------------------------

def resolve_inside(workdir: Path, candidate: str) -> Path:
    """Resolve a path argument and require it to stay inside workdir."""
    base = workdir.resolve()
    path = Path(candidate)
    resolved = (path if path.is_absolute() else base / path).resolve()
    if resolved != base and base not in resolved.parents:
        raise SandboxViolation(f"path escapes working directory: {candidate}")
    return resolved


def check_shell_command(workdir: Path, command: str) -> None:
    """Reject commands whose path-looking tokens leave the working directory."""
    try:
        tokens = shlex.split(command)
    except ValueError as exc:
        raise SandboxViolation(f"unparseable shell command: {exc}") from exc
    for token in tokens:
        stripped = token.lstrip("<>")
        if stripped.startswith("/") or stripped.startswith("..") or "/../" in stripped:
            resolve_inside(workdir, stripped)


def truncate_output(text: str, cap_bytes: int) -> tuple[str, bool]:
    encoded = text.encode("utf-8", errors="replace")
    if len(encoded) <= cap_bytes:
        return text, False
    cut = encoded[:cap_bytes].decode("utf-8", errors="ignore")
    return cut + TRUNCATION_MARKER, True


# -- tools -----------------------------------------------------------------

def file_read_page(workdir: Path, path: str, page: int,
                   page_size_lines: int = 50) -> tuple[str, int, int]:
    """Lines [(page-1)*size+1 .. page*size] of a file; 1-indexed pages."""
    if page < 1:
        raise ValueError("page must be >= 1")
    target = resolve_inside(workdir, path)
    lines = target.read_text(encoding="utf-8", errors="replace").splitlines()
    total_pages = max(1, -(-len(lines) // page_size_lines))
    if page > total_pages:
        raise ValueError(f"page {page} beyond total_pages {total_pages}")
    chunk = lines[(page - 1) * page_size_lines:page * page_size_lines]
    return "\n".join(chunk), page, total_pages


class Workbench:
    def __init__(self, cfg: WorkbenchConfig, journal: Journal, gateway: Gateway):
        self.cfg = cfg
        self._journal = journal
        self._gateway = gateway

    # Shell and script execution mutate the working directory, so on
    # journal replay they re-execute to rebuild filesystem state; the
    # journaled payload stays authoritative for what the model saw.
    def _dispatch(self, workdir: Path, call: ToolCall) -> ToolResult:
        budgets = self.cfg.budgets
        tool = call.tool

        def run_subprocess(argv_or_cmd, shell: bool) -> tuple[dict, dict]:
            started = time.monotonic()
            try:
                proc = subprocess.run(
                    argv_or_cmd, shell=shell, cwd=workdir, capture_output=True,
                    text=True, timeout=budgets.call_timeout_s,
                )
                output = proc.stdout + proc.stderr
                exit_status = proc.returncode
                ok = proc.returncode == 0
            except subprocess.TimeoutExpired:
                output = f"timed out after {budgets.call_timeout_s}s"
                exit_status = None
                ok = False
            output, truncated = truncate_output(output, budgets.output_cap_bytes)
            payload = {"ok": ok, "output": output, "exit_status": exit_status,
                       "meta": {"truncated": truncated}}
            return payload, {"duration_s": time.monotonic() - started}

        if tool == "shell_exec":
            def compute():
                try:
                    check_shell_command(workdir, call.arguments["command"])
                except SandboxViolation as exc:
                    return {"ok": False, "output": f"sandbox: {exc}",
                            "exit_status": None, "meta": {"sandbox": True}}
                return run_subprocess(call.arguments["command"], shell=True)

            payload = self._journal.record("workbench.exec", compute,
                                           reexecute_on_replay=True)
        elif tool == "script_run":
            def compute():
                try:
                    script = resolve_inside(workdir, call.arguments["path"])
                except SandboxViolation as exc:
                    return {"ok": False, "output": f"sandbox: {exc}",
                            "exit_status": None, "meta": {"sandbox": True}}
                argv = [self.cfg.interpreter, str(script)]
                argv += shlex.split(call.arguments.get("args", ""))
                return run_subprocess(argv, shell=False)

            payload = self._journal.record("workbench.exec", compute,
                                           reexecute_on_replay=True)
        elif tool == "file_read_page":
            def compute():
                try:
                    page = int(call.arguments["page"])
                    text, page_no, total = file_read_page(
                        workdir, call.arguments["path"], page)
                except (ValueError, OSError, SandboxViolation) as exc:
                    return {"ok": False, "output": str(exc),
                            "exit_status": None, "meta": {}}
                text, truncated = truncate_output(text, budgets.output_cap_bytes)
                return {"ok": True, "output": text, "exit_status": None,
                        "meta": {"page": page_no, "total_pages": total,
                                 "truncated": truncated}}

            payload = self._journal.record("workbench.exec", compute)
        elif tool == "web_fetch_stub":
            def compute():
                url = call.arguments["url"]
                fixture = self.cfg.fetch_fixtures.get(url)
                if fixture is None:
                    # Fails closed: only fixture-mapped URLs resolve.
                    return {"ok": False, "output": f"no fixture for url {url!r}",
                            "exit_status": None, "meta": {"url": url}}
                body = Path(fixture).read_text(encoding="utf-8", errors="replace")
                body, truncated = truncate_output(body, budgets.output_cap_bytes)
                return {"ok": True, "output": body, "exit_status": None,
                        "meta": {"url": url, "truncated": truncated}}

            payload = self._journal.record("workbench.exec", compute)
        else:
            raise ValueError(f"cannot dispatch tool {tool!r}")
        return ToolResult(payload["ok"], payload["output"],
                          payload["exit_status"], payload["meta"])

    def run_session(self, instructions: str, workdir: Path,
                    tag: str = "follower.workbench.step") -> SessionLog:
        """The tool-use loop: prompt, parse one call, dispatch, repeat.

        Ends when the model terminates, the call budget is spent, or the
        wall-clock budget runs out. The workdir starts empty every time so
        that a resumed run rebuilds identical state.
        """
        budgets = self.cfg.budgets
        if workdir.exists():
            import shutil

            shutil.rmtree(workdir)
        workdir.mkdir(parents=True)
        self._journal.mark("workbench.session.start", {
            "workdir": workdir.name, "instructions_chars": len(instructions),
        })
        log = SessionLog()
        deadline = time.monotonic() + budgets.wall_s
        consecutive_failures = 0
        while True:
            if len(log.entries) >= budgets.calls:
                log.termination_reason = "call_limit"
                break
            if time.monotonic() > deadline:
                log.termination_reason = "time_limit"
                break
            prompt = self._session_prompt(instructions, log)
            text = self._gateway.ask(tag, [("user", prompt)])
            try:
                call = parse_tool_call(text)
                consecutive_failures = 0
            except ValueError as exc:
                consecutive_failures += 1
                call = ToolCall("parse_error", {})
                result = ToolResult(False, f"tool call parse error: {exc}")
                self._journal.mark("workbench.parse_failure", {
                    "error": str(exc), "consecutive": consecutive_failures,
                })
                log.entries.append((call, result))
                if consecutive_failures >= 3:
                    log.termination_reason = "call_limit"
                    break
                continue
            if call.tool == "terminate":
                log.entries.append((call, ToolResult(True, "session terminated")))
                log.termination_reason = "model_terminated"
                break
            result = self._dispatch(workdir, call)
            log.entries.append((call, result))
        self._journal.mark("workbench.session.end", {
            "reason": log.termination_reason, "calls": len(log.entries),
        })
        return log

    def _session_prompt(self, instructions: str, log: SessionLog) -> str:
        tail = log.entries[-3:]
        rendered = []
        for call, result in tail:
            args = " ".join(f"{k}={v}" for k, v in sorted(call.arguments.items()))
            out, _ = truncate_output(result.output, 2000)
            rendered.append(f"$ {call.tool} {args}\n{out}")
        history = "\n".join(rendered) if rendered else "(no calls yet)"
        return (
            "You are working in a sandboxed project directory on this task:\n"
            f"{instructions}\n\n"
            "Recent session activity:\n"
            f"{history}\n\n"
            "Reply with exactly one fenced tool block:\n"
            "```tool\n"
            "tool: shell_exec | script_run | file_read_page | web_fetch_stub | terminate\n"
            "command: <for shell_exec>\n"
            "path: <for script_run / file_read_page>\n"
            "args: <optional, for script_run>\n"
            "page: <for file_read_page>\n"
            "url: <for web_fetch_stub>\n"
            "```\n"
            "Use terminate when the task is complete."
        )


# -- project flattening ------------------------------------------------------

def _ignored(rel_path: Path, patterns: list[str]) -> bool:
    parts = rel_path.parts
    for pattern in patterns:
        if fnmatch.fnmatch(rel_path.as_posix(), pattern):
            return True
        if any(fnmatch.fnmatch(part, pattern) for part in parts):
            return True
    return False


def flatten_project(workdir: Path, ignore_patterns: list[str] | None = None,
                    session_log: SessionLog | None = None) -> str:
    """One document for the whole directory tree, deterministically ordered.

    Files appear in lexicographic relative-path order, each under a path
    header; the session log, when given, is appended at the end. Unreadable
    files get a placeholder entry so the output shape stays stable.
    """
    ignore_patterns = ignore_patterns or []
    paths = sorted(
        (p.relative_to(workdir) for p in workdir.rglob("*")
         if p.is_file() or (p.is_symlink() and not p.is_dir())),
        key=lambda p: p.as_posix(),
    )
    chunks = []
    for rel in paths:
        if _ignored(rel, ignore_patterns):
            continue
        header = f"===== FILE: {rel.as_posix()} ====="
        try:
            body = (workdir / rel).read_text(encoding="utf-8", errors="replace")
        except OSError as exc:
            body = f"<<unreadable: {exc.__class__.__name__}>>\n"
        if body and not body.endswith("\n"):
            body += "\n"
        chunks.append(f"{header}\n{body}")
    if session_log is not None:
        chunks.append("===== SESSION LOG =====\n" + session_log.render() + "\n")
    return "\n".join(chunks)
