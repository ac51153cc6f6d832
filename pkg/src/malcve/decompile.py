"""Run external Java decompilers with primary/fallback semantics.

Tools are plain argv templates; ``{jar}`` and ``{outdir}`` are substituted
per argument after splitting, so paths are never shell-interpreted.  A run
counts as successful only if the tool exits 0 and leaves at least one
non-empty ``.java`` file behind.
"""
from __future__ import annotations

import logging
import shlex
import shutil
import subprocess
import tempfile
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

from .deobf import SourceUnit
from .errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 120.0


class DecompilerConfigError(ConfigError):
    pass


@dataclass(frozen=True)
class DecompilerSpec:
    name: str
    command_template: str
    timeout: float = DEFAULT_TIMEOUT
    role: str = "primary"

    def argv(self, jar: Path, outdir: Path) -> list[str]:
        return [arg.replace("{jar}", str(jar)).replace("{outdir}", str(outdir))
                for arg in shlex.split(self.command_template)]


DEFAULT_DECOMPILERS = (
    DecompilerSpec("cfr-0.152", "java -jar cfr-0.152.jar {jar} --outputdir {outdir}", role="primary"),
    DecompilerSpec("procyon-0.6.0", "java -jar procyon-decompiler-0.6.0.jar -o {outdir} {jar}",
                   role="fallback"),
)


@dataclass
class DecompileResult:
    status: str                 # ok | failed | excluded
    tool_used: str | None = None
    source_dir: Path | None = None
    diagnostics: str = ""

    def summary(self) -> dict:
        return {"status": self.status, "tool_used": self.tool_used, "diagnostics": self.diagnostics}

    def cleanup(self) -> None:
        if self.source_dir is not None:
            shutil.rmtree(self.source_dir, ignore_errors=True)


def order_specs(specs: Sequence[DecompilerSpec]) -> list[DecompilerSpec]:
    primaries = [s for s in specs if s.role == "primary"]
    if len(primaries) != 1:
        raise DecompilerConfigError(f"need exactly one primary decompiler, got {len(primaries)}")
    bad = [s.name for s in specs if s.role not in ("primary", "fallback")]
    if bad:
        raise DecompilerConfigError(f"unknown decompiler role for {bad}")
    return primaries + [s for s in specs if s.role == "fallback"]


def _java_files(root: Path) -> list[Path]:
    return sorted(p for p in root.rglob("*.java") if p.is_file() and p.stat().st_size > 0)


def check_available(specs: Sequence[DecompilerSpec]) -> None:
    """Raise DecompilerConfigError if any configured executable is missing."""
    for spec in specs:
        exe = shlex.split(spec.command_template)[0]
        if shutil.which(exe) is None and not Path(exe).is_file():
            raise DecompilerConfigError(f"decompiler {spec.name!r}: executable {exe!r} not found")


def _run_one(spec: DecompilerSpec, jar: Path, outdir: Path) -> str | None:
    """Run one tool; return a failure diagnostic or None on success."""
    argv = spec.argv(jar, outdir)
    if shutil.which(argv[0]) is None and not Path(argv[0]).is_file():
        raise DecompilerConfigError(f"decompiler {spec.name!r}: executable {argv[0]!r} not found")
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=spec.timeout, check=False)
    except subprocess.TimeoutExpired:
        return f"{spec.name}: timed out after {spec.timeout:g}s"
    except FileNotFoundError as exc:
        raise DecompilerConfigError(f"decompiler {spec.name!r}: {exc}") from exc
    if proc.returncode != 0:
        tail = (proc.stderr or proc.stdout).strip().splitlines()[-3:]
        return f"{spec.name}: exit {proc.returncode}" + (f" ({' | '.join(tail)})" if tail else "")
    if not _java_files(outdir):
        return f"{spec.name}: no .java output"
    return None


def decompile(jar_path: Path | str, specs: Sequence[DecompilerSpec], workdir: Path | str) -> DecompileResult:
    """Try the primary tool, then each fallback; exclude the file if all fail."""
    jar = Path(jar_path)
    if not jar.is_file():
        raise FileNotFoundError(f"no such file: {jar}")
    ordered = order_specs(specs)
    Path(workdir).mkdir(parents=True, exist_ok=True)
    diagnostics = []
    for spec in ordered:
        outdir = Path(tempfile.mkdtemp(prefix="src-", dir=workdir))
        try:
            failure = _run_one(spec, jar, outdir)
        except BaseException:
            shutil.rmtree(outdir, ignore_errors=True)
            raise
        if failure is None:
            return DecompileResult("ok", spec.name, outdir, "; ".join(diagnostics))
        logger.info("decompiler failed: %s", failure)
        diagnostics.append(failure)
        shutil.rmtree(outdir, ignore_errors=True)
    return DecompileResult("excluded", None, None, "; ".join(diagnostics))


@contextmanager
def decompiled(jar_path: Path | str, specs: Sequence[DecompilerSpec],
               workdir: Path | str) -> Iterator[DecompileResult]:
    """Decompile and remove the emitted sources when the block exits."""
    result = decompile(jar_path, specs, workdir)
    try:
        yield result
    finally:
        result.cleanup()


def load_sources(source_dir: Path) -> list[SourceUnit]:
    root = Path(source_dir)
    return [SourceUnit(p.relative_to(root).as_posix(), p.read_text("utf-8", errors="replace"))
            for p in _java_files(root)]
