"""State-ID computation.

A state ID is the MD5 of the parent ID plus the instruction's visible
input.  MD5 is deliberate: the cache is not hardened against tampering,
only against accidental collisions.
"""

from __future__ import annotations

import hashlib
import os
import stat
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from flatcache.errors import BuildError, UsageError
from flatcache.recipe import Instruction

ROOT_BYTES = bytes.fromhex("4a6f73c3a92043617061626c616e6361")

KINDS = ("ROOT", "PULL", "INSTR")

DEFAULT_EXCLUDED = frozenset(
    [v for name in ("HTTP_PROXY", "HTTPS_PROXY", "FTP_PROXY", "ALL_PROXY", "NO_PROXY")
     for v in (name, name.lower())]
    + ["SSH_AUTH_SOCK"]
)


@dataclass(frozen=True)
class StateID:
    raw: bytes

    def __post_init__(self):
        if len(self.raw) != 16:
            raise ValueError("state ID must be exactly 16 bytes")

    @classmethod
    def from_hex(cls, text: str) -> "StateID":
        return cls(bytes.fromhex(text))

    @property
    def hex(self) -> str:
        return self.raw.hex()

    @property
    def abbrev(self) -> str:
        return self.raw.hex()[:4].upper()

    def __str__(self) -> str:
        return self.hex

    def __repr__(self) -> str:
        return f"StateID({self.hex})"


@dataclass(frozen=True)
class DigestInput:
    kind_tag: str
    payload: bytes = b""
    extra: bytes = b""

    def __post_init__(self):
        if self.kind_tag not in KINDS:
            raise ValueError(f"unknown digest kind {self.kind_tag!r}")
        if self.kind_tag == "ROOT" and (self.payload or self.extra):
            raise ValueError("ROOT digest input carries no payload")


def root_id() -> StateID:
    return StateID(ROOT_BYTES)


def state_id(parent: StateID, input: DigestInput) -> StateID:
    if input.kind_tag == "ROOT":
        raise UsageError("ROOT has no parent; use root_id()")
    h = hashlib.md5()
    for part in (parent.raw, b"\0", input.kind_tag.encode("ascii"), b"\0",
                 input.payload, b"\0", input.extra):
        h.update(part)
    return StateID(h.digest())


def pull_input(manifest_bytes: bytes) -> DigestInput:
    # The image reference is deliberately absent: renamed images share IDs.
    return DigestInput("PULL", manifest_bytes)


@dataclass(frozen=True)
class FileStatSummary:
    path: str
    ftype: str
    mode: int
    size: int
    mtime: int

    def serialize(self) -> bytes:
        fields = (self.path, self.ftype, format(self.mode, "o"), str(self.size), str(self.mtime))
        return "\0".join(fields).encode("utf-8", "surrogateescape") + b"\n"


def _ftype(st) -> str:
    if stat.S_ISLNK(st.st_mode):
        return "symlink"
    if stat.S_ISDIR(st.st_mode):
        return "directory"
    if stat.S_ISREG(st.st_mode):
        return "regular"
    raise BuildError("unsupported file type")


def _summary(rel: str, st) -> FileStatSummary:
    return FileStatSummary(rel, _ftype(st), stat.S_IMODE(st.st_mode), st.st_size, st.st_mtime_ns)


def copy_sources(context_dir: Path, sources: Iterable[str]) -> list[Path]:
    """Resolve COPY sources inside ``context_dir``; raise on missing or escaping paths."""
    context = Path(context_dir).resolve()
    out = []
    for src in sources:
        rel = os.path.normpath(src.lstrip("/"))
        if rel == ".." or rel.startswith("../"):
            raise BuildError(f"COPY source outside context: {src}")
        path = context / rel
        if not os.path.lexists(path):
            raise BuildError(f"COPY source not found: {src}")
        out.append(path)
    return out


def stat_summaries(context_dir: Path, sources: Iterable[str]) -> list[FileStatSummary]:
    """Metadata of every COPY source file, recursing into directories, sorted by path."""
    context = Path(context_dir).resolve()
    found: dict[str, FileStatSummary] = {}
    for path in copy_sources(context, sources):
        rel = os.path.relpath(path, context)
        try:
            st = path.lstat()
            found[rel] = _summary(rel, st)
        except BuildError:
            raise BuildError(f"COPY source has unsupported file type: {rel}") from None
        if stat.S_ISDIR(st.st_mode):
            for dirpath, dirnames, filenames in os.walk(path):
                for name in dirnames + filenames:
                    p = os.path.join(dirpath, name)
                    r = os.path.relpath(p, context)
                    try:
                        found[r] = _summary(r, os.lstat(p))
                    except BuildError:
                        raise BuildError(f"COPY source has unsupported file type: {r}") from None
    return [found[k] for k in sorted(found, key=lambda p: p.encode("utf-8", "surrogateescape"))]


@dataclass
class DigestContext:
    """What instruction digests may depend on besides their text."""

    context_dir: Path | None = None
    excluded: frozenset = DEFAULT_EXCLUDED


def _var_payload(kind: str, pairs, excluded) -> bytes:
    parts = []
    for name, value in pairs:
        if value is None or name in excluded:
            parts.append(name)
        else:
            parts.append(f"{name}={value}")
    return f"{kind} {' '.join(parts)}".encode("utf-8", "surrogateescape")


def digest_input_for(ins: Instruction, ctx: DigestContext) -> DigestInput | None:
    """Visible input of one instruction, or None for FROM and ignored instructions."""
    if ins.ignored or ins.kind == "FROM":
        return None
    if ins.kind in ("ARG", "ENV"):
        return DigestInput("INSTR", _var_payload(ins.kind, ins.args, ctx.excluded))
    text = ins.text.encode("utf-8", "surrogateescape")
    if ins.kind == "COPY":
        if ctx.context_dir is None:
            raise UsageError("COPY requires a context directory")
        summaries = stat_summaries(ctx.context_dir, ins.args["sources"])
        return DigestInput("INSTR", text, b"".join(s.serialize() for s in summaries))
    return DigestInput("INSTR", text)
