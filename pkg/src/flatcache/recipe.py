"""Parsing of the supported Dockerfile subset."""

from __future__ import annotations

import logging
import re
import shlex
from dataclasses import dataclass
from typing import Any, Mapping

from flatcache.errors import RecipeError

log = logging.getLogger(__name__)

SUPPORTED = ("FROM", "RUN", "COPY", "ARG", "ENV", "WORKDIR")
# Parsed and then skipped: these do not change the image's files.
IGNORED = (
    "CMD", "ENTRYPOINT", "EXPOSE", "HEALTHCHECK", "LABEL", "MAINTAINER",
    "ONBUILD", "SHELL", "STOPSIGNAL", "USER", "VOLUME",
)

_CONTINUATION = re.compile(r"\\[ \t]*$")


@dataclass(frozen=True)
class ImageRef:
    """Registry image reference, e.g. ``registry:5000/lib/alpine:3.17``."""

    name: str
    tag: str = "latest"
    host: str | None = None

    @classmethod
    def parse(cls, text: str) -> "ImageRef":
        text = text.strip()
        if not text or any(c.isspace() for c in text):
            raise RecipeError(f"invalid image reference: {text!r}")
        if "@" in text:
            raise RecipeError(f"digest references not supported: {text}")
        host = None
        first, sep, rest = text.partition("/")
        if sep and ("." in first or ":" in first or first == "localhost"):
            host, text = first, rest
        name, sep, tag = text.rpartition(":")
        if not sep or "/" in tag:
            name, tag = text, "latest"
        if not name or not tag:
            raise RecipeError(f"invalid image reference: {text!r}")
        return cls(name=name, tag=tag, host=host)

    def __str__(self) -> str:
        prefix = f"{self.host}/" if self.host else ""
        return f"{prefix}{self.name}:{self.tag}"

    @property
    def branch(self) -> str:
        return sanitize(str(self))


def sanitize(name: str) -> str:
    """Map an image name to its Git branch form (``:`` → ``+``, ``/`` → ``%``)."""
    return name.replace(":", "+").replace("/", "%")


def unsanitize(branch: str) -> str:
    return branch.replace("+", ":").replace("%", "/")


@dataclass(frozen=True)
class Instruction:
    kind: str
    text: str
    args: Any = None
    line: int = 0
    ignored: bool = False


def normalize(kind: str, raw_args: str) -> str:
    """Canonical instruction text: upper-case keyword, whitespace collapsed
    outside quotes, everything else (including inline ``#``) kept verbatim."""
    out = []
    quote = None
    pending_space = False
    chars = iter(raw_args.strip())
    for c in chars:
        if quote is None and c.isspace():
            pending_space = True
            continue
        if pending_space:
            out.append(" ")
            pending_space = False
        out.append(c)
        if c == "\\" and quote != "'":
            nxt = next(chars, None)
            if nxt is not None:
                out.append(nxt)
        elif quote is None and c in "'\"":
            quote = c
        elif c == quote:
            quote = None
    body = "".join(out)
    kind = kind.upper()
    return f"{kind} {body}" if body else kind


def _logical_lines(source: str):
    """Yield (first physical line number, folded text) pairs."""
    lines = source.replace("\r\n", "\n").replace("\r", "\n").split("\n")
    buf: list[str] = []
    start = 0
    for lineno, line in enumerate(lines, 1):
        stripped = line.strip()
        if stripped.startswith("#"):
            continue
        if not buf and not stripped:
            continue
        if not buf:
            start = lineno
        m = _CONTINUATION.search(line)
        if m:
            buf.append(line[: m.start()])
            continue
        buf.append(line)
        yield start, "".join(buf)
        buf = []
    if buf:
        yield start, "".join(buf)


def _parse_pairs(kind: str, rest: str, lineno: int) -> list[tuple[str, str | None]]:
    try:
        words = shlex.split(rest, posix=True)
    except ValueError as e:
        raise RecipeError(f"{kind}: {e}", lineno) from None
    if not words:
        raise RecipeError(f"{kind} needs an argument", lineno)
    if kind == "ENV" and "=" not in words[0]:
        # legacy form: ENV NAME value with spaces
        name, _, value = rest.strip().partition(" ")
        if not value.strip():
            raise RecipeError("ENV needs a value", lineno)
        return [(name, value.strip())]
    pairs = []
    for w in words:
        name, sep, value = w.partition("=")
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", name):
            raise RecipeError(f"{kind}: invalid variable name {name!r}", lineno)
        if kind == "ENV" and not sep:
            raise RecipeError(f"ENV {name}: missing value", lineno)
        pairs.append((name, value if sep else None))
    return pairs


def _parse_copy(rest: str, lineno: int) -> dict:
    if rest.lstrip().startswith("["):
        raise RecipeError("COPY exec (JSON) form not supported", lineno)
    words = shlex.split(rest)
    while words and words[0].startswith("--"):
        flag = words.pop(0)
        if flag.startswith("--from"):
            raise RecipeError("COPY --from (multi-stage) not supported", lineno)
        log.warning("line %d: ignoring COPY option %s", lineno, flag)
    if len(words) < 2:
        raise RecipeError("COPY needs at least one source and a destination", lineno)
    for src in words[:-1]:
        if any(c in src for c in "*?["):
            raise RecipeError(f"COPY glob patterns not supported: {src}", lineno)
    return {"sources": words[:-1], "dest": words[-1]}


def parse(source: str, build_args: Mapping[str, str] | None = None) -> list[Instruction]:
    """Parse recipe text into instructions, in source order.

    ``build_args`` override ARG defaults.  Raises :class:`RecipeError` for
    content-changing instructions we cannot handle, a misplaced FROM, or an
    empty recipe.
    """
    build_args = dict(build_args or {})
    result: list[Instruction] = []
    for lineno, text in _logical_lines(source):
        keyword, rest = (re.split(r"\s+", text.strip(), maxsplit=1) + [""])[:2]
        kind = keyword.upper()
        normalized = normalize(kind, rest)
        if kind in IGNORED:
            log.warning("line %d: %s ignored", lineno, kind)
            result.append(Instruction(kind, normalized, None, lineno, ignored=True))
            continue
        if kind not in SUPPORTED:
            raise RecipeError(f"unsupported instruction: {keyword}", lineno)
        if kind == "FROM":
            if any(not i.ignored for i in result):
                raise RecipeError("FROM must be the first instruction", lineno)
            words = rest.split()
            if not words or words[0].startswith("--") or (
                    len(words) not in (1, 3) or (len(words) == 3 and words[1].upper() != "AS")):
                raise RecipeError(f"unsupported FROM syntax: {rest!r}", lineno)
            args: Any = words[0]
        elif kind == "RUN":
            if not rest:
                raise RecipeError("RUN needs a command", lineno)
            if rest.startswith("["):
                raise RecipeError("RUN exec (JSON) form not supported", lineno)
            args = rest
        elif kind == "COPY":
            args = _parse_copy(rest, lineno)
        elif kind == "ARG":
            args = [(name, build_args.get(name, default))
                    for name, default in _parse_pairs(kind, rest, lineno)]
        elif kind == "ENV":
            args = _parse_pairs(kind, rest, lineno)
        else:  # WORKDIR
            if not rest:
                raise RecipeError("WORKDIR needs a path", lineno)
            args = rest
        result.append(Instruction(kind, normalized, args, lineno))
    if not any(not i.ignored for i in result):
        raise RecipeError("no instructions")
    return result
