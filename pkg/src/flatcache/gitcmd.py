"""Thin wrapper over the git command line, bound to one bare repository."""

from __future__ import annotations

import os
import signal
import subprocess
from pathlib import Path

from flatcache.errors import StoreError

MIN_VERSION = (2, 30)

_IDENTITY = {
    "GIT_AUTHOR_NAME": "flatcache",
    "GIT_AUTHOR_EMAIL": "flatcache@localhost",
    "GIT_COMMITTER_NAME": "flatcache",
    "GIT_COMMITTER_EMAIL": "flatcache@localhost",
}

REPO_CONFIG = {
    "core.autocrlf": "false",
    "core.filemode": "true",
    "core.symlinks": "true",
    "core.trustctime": "false",
    "core.excludesfile": "/dev/null",
    "core.quotepath": "false",
    "gc.auto": "0",
    "gc.autodetach": "false",
    "gc.reflogexpire": "now",
    "gc.reflogexpireunreachable": "now",
    "advice.detachedHead": "false",
}


class GitError(StoreError):
    def __init__(self, args, returncode, stderr):
        self.returncode = returncode
        self.stderr = stderr
        super().__init__(f"git {' '.join(args)} failed ({returncode}): {stderr.strip()}")


def _die_with_parent():
    # Linux only: a killed compaction must not leave git running unlocked.
    try:
        import ctypes

        libc = ctypes.CDLL(None, use_errno=True)
        libc.prctl(1, signal.SIGKILL)  # PR_SET_PDEATHSIG
    except Exception:
        pass


def git_version() -> tuple[int, ...]:
    out = subprocess.run(["git", "--version"], capture_output=True, text=True, check=True).stdout
    parts = out.split()[2].split(".")
    return tuple(int(p) for p in parts[:2] if p.isdigit())


class Git:
    def __init__(self, git_dir: Path):
        self.git_dir = Path(git_dir)

    def env(self, work_tree=None, index=None) -> dict:
        env = dict(os.environ)
        for var in ("GIT_WORK_TREE", "GIT_INDEX_FILE", "GIT_OBJECT_DIRECTORY",
                    "GIT_ALTERNATE_OBJECT_DIRECTORIES", "GIT_CEILING_DIRECTORIES"):
            env.pop(var, None)
        env.update(_IDENTITY)
        env["GIT_DIR"] = str(self.git_dir)
        env["GIT_CONFIG_NOSYSTEM"] = "1"
        env["LC_ALL"] = "C"
        if work_tree is not None:
            env["GIT_WORK_TREE"] = str(work_tree)
        if index is not None:
            env["GIT_INDEX_FILE"] = str(index)
        return env

    def run(self, *args, work_tree=None, index=None, input: bytes | None = None,
            check=True, die_with_parent=False) -> bytes:
        proc = subprocess.run(
            ["git", *args],
            input=input,
            capture_output=True,
            env=self.env(work_tree, index),
            cwd=str(work_tree) if work_tree is not None else str(self.git_dir),
            preexec_fn=_die_with_parent if die_with_parent else None,
        )
        if check and proc.returncode != 0:
            raise GitError(args, proc.returncode, proc.stderr.decode(errors="replace"))
        return proc.stdout

    def text(self, *args, **kw) -> str:
        return self.run(*args, **kw).decode().strip()

    def init_bare(self):
        subprocess.run(["git", "init", "-q", "--bare", str(self.git_dir)],
                       check=True, capture_output=True, env={**os.environ, "LC_ALL": "C"})
        for key, value in REPO_CONFIG.items():
            self.run("config", key, value)

    def commit_tree(self, tree: str, parent: str | None, message: str) -> str:
        args = ["commit-tree", tree, "-m", message]
        if parent:
            args += ["-p", parent]
        return self.text(*args)

    def update_ref(self, ref: str, sha: str):
        self.run("update-ref", ref, sha)

    def update_refs(self, commands: list[str]):
        if commands:
            self.run("update-ref", "--stdin", input=("\n".join(commands) + "\n").encode())

    def refs(self, prefix: str) -> dict[str, str]:
        out = self.text("for-each-ref", "--format=%(refname) %(objectname)", prefix)
        refs = {}
        for line in out.splitlines():
            name, sha = line.split(" ")
            refs[name] = sha
        return refs

    def missing_objects(self, shas) -> set[str]:
        shas = list(shas)
        if not shas:
            return set()
        out = self.run("cat-file", "--batch-check", input=("\n".join(shas) + "\n").encode())
        return {line.split()[0] for line in out.decode().splitlines() if line.endswith(" missing")}

    def read_blobs(self, specs: list[str]) -> list[bytes | None]:
        """Contents of ``<rev>:<path>`` specs in one batch; None where absent."""
        if not specs:
            return []
        out = self.run("cat-file", "--batch", input=("\n".join(specs) + "\n").encode())
        result = []
        pos = 0
        for _ in specs:
            nl = out.index(b"\n", pos)
            header = out[pos:nl].decode()
            pos = nl + 1
            if header.endswith(" missing") or header.endswith(" ambiguous"):
                result.append(None)
                continue
            size = int(header.rsplit(" ", 1)[1])
            result.append(out[pos:pos + size])
            pos += size + 1
        return result
