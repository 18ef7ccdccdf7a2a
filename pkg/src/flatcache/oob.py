"""Out-of-band storage for large files.

Files above the threshold never reach Git.  They are identified by
metadata (mtime, mode, size, path), moved into ``bularge`` and hard-linked
back into images.  Two files with equal metadata are assumed equal.
"""

from __future__ import annotations

import hashlib
import logging
import os
import shutil
import stat
from dataclasses import dataclass
from pathlib import Path

from flatcache.errors import CorruptionError

log = logging.getLogger(__name__)

MiB = 1024 * 1024
DEFAULT_THRESHOLD = 4 * MiB


def oob_key(path: str, st: os.stat_result) -> str:
    path_hash = hashlib.md5(path.encode("utf-8", "surrogateescape")).hexdigest()
    return f"{st.st_mtime_ns}-{stat.S_IMODE(st.st_mode):o}-{st.st_size}-{path_hash}"


def parse_key(key: str) -> tuple[int, int, int, str]:
    mtime, mode, size, path_hash = key.split("-")
    return int(mtime), int(mode, 8), int(size), path_hash


def is_large(st: os.stat_result, threshold: int | None) -> bool:
    return bool(threshold) and stat.S_ISREG(st.st_mode) and st.st_size > threshold


@dataclass
class OOBEntry:
    key: str
    stored_path: Path


class LargeFileStore:
    def __init__(self, root: Path):
        self.root = Path(root)

    def path(self, key: str) -> Path:
        return self.root / key

    def __contains__(self, key: str) -> bool:
        return self.path(key).exists()

    def keys(self) -> set[str]:
        try:
            return {p.name for p in self.root.iterdir() if not p.name.startswith(".")}
        except FileNotFoundError:
            return set()

    def stash(self, file: Path, key: str) -> OOBEntry:
        """Move ``file`` into storage under ``key``, or drop it if already stored."""
        dest = self.path(key)
        if dest.exists():
            os.unlink(file)
        else:
            try:
                os.rename(file, dest)
            except OSError as e:
                if e.errno != 18:  # EXDEV
                    raise
                log.warning("%s: cross-device move, copying into large-file storage", file)
                tmp = dest.with_name(f".tmp-{key}")
                shutil.copy2(file, tmp)
                os.rename(tmp, dest)
                os.unlink(file)
        return OOBEntry(key, dest)

    def restore(self, key: str, dest: Path):
        src = self.path(key)
        if not src.exists():
            raise CorruptionError(f"large file {key} missing from {self.root}")
        tmp = Path(dest).with_name(f".{Path(dest).name}.oob-link")
        if os.path.lexists(tmp):
            os.unlink(tmp)
        os.link(src, tmp)
        os.rename(tmp, dest)

    def is_linked(self, key: str, file: Path) -> bool:
        """True if ``file`` is a hard link to the stored copy of ``key``."""
        try:
            a = os.lstat(file)
            b = os.lstat(self.path(key))
        except FileNotFoundError:
            return False
        return (a.st_dev, a.st_ino) == (b.st_dev, b.st_ino)

    def break_link(self, key: str, file: Path) -> bool:
        """Give ``file`` its own inode so writes cannot reach the stored copy."""
        if not self.is_linked(key, file):
            return False
        tmp = Path(file).with_name(f".{Path(file).name}.oob-copy")
        shutil.copy2(file, tmp)
        os.rename(tmp, file)
        return True

    def gc(self, live: set[str]) -> int:
        removed = 0
        for key in self.keys() - set(live):
            try:
                os.unlink(self.path(key))
                removed += 1
            except FileNotFoundError:
                pass
        return removed
