"""Git-backed storage of whole image states.

Layout of a storage directory::

    bucache/   bare Git repository (plus flatcache/ bookkeeping inside it)
    img/       one worktree per image name
    dlcache/   downloaded manifests and blobs, named by digest
    bularge/   out-of-band large files, named by metadata key

Git only knows regular files, symlinks and non-empty directories, and no
metadata beyond the executable bit.  Committing therefore records what Git
would lose in a manifest at ``/ch/git-meta``, strips the tree down to what
Git can hold, commits, and puts everything back.  Checkout replays it.
"""

from __future__ import annotations

import contextlib
import fcntl
import logging
import os
import shutil
import stat
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from flatcache import oob
from flatcache.digest import StateID, root_id
from flatcache.errors import CorruptionError, LockError, StoreError, UsageError
from flatcache.gitcmd import MIN_VERSION, Git, git_version
from flatcache.meta import (
    CONTROL_DIR,
    CONTROL_FILES,
    MANIFEST_PATH,
    METADATA_PATH,
    FileRecord,
    ImageMetadata,
    MetadataManifest,
)
from flatcache.tree import CacheNode, CacheTree

log = logging.getLogger(__name__)

GIT_PREFIX = ".git"
RENAMED_PREFIX = ".weirdal_"
SUBDIRS = ("bucache", "img", "dlcache", "bularge")


def _rmtree(path: Path):
    def onerror(func, p, exc_info):
        # read-only directories block deletion of their entries
        try:
            os.chmod(os.path.dirname(p), 0o700)
            if os.path.isdir(p) and not os.path.islink(p):
                os.chmod(p, 0o700)
            func(p)
        except FileNotFoundError:
            pass

    if os.path.lexists(path):
        shutil.rmtree(path, onerror=onerror)


def _ftype(st) -> str:
    m = st.st_mode
    if stat.S_ISREG(m):
        return "regular"
    if stat.S_ISDIR(m):
        return "directory"
    if stat.S_ISLNK(m):
        return "symlink"
    if stat.S_ISFIFO(m):
        return "fifo"
    if stat.S_ISSOCK(m):
        return "socket"
    return "device"


def walk(root: Path) -> list[tuple[str, os.stat_result]]:
    """Pre-order, name-sorted listing of everything under ``root`` except
    the control files."""
    out = []

    def visit(dirpath: str, prefix: str):
        try:
            names = sorted(os.listdir(dirpath))
        except FileNotFoundError:
            raise StoreError(f"directory vanished during walk: {prefix or '/'}") from None
        for name in names:
            rel = f"{prefix}{name}"
            if rel in CONTROL_FILES:
                continue
            p = os.path.join(dirpath, name)
            try:
                st = os.lstat(p)
            except FileNotFoundError:
                raise StoreError(f"file vanished during walk: {rel}") from None
            out.append((rel, st))
            if stat.S_ISDIR(st.st_mode):
                visit(p, rel + "/")

    visit(str(root), "")
    return out


def snapshot(root: Path) -> dict:
    """Everything round-trip equivalence compares: per path the file type,
    content (or link target), mode and mtime, plus the hard-link partition.

    Two trees are equivalent when their snapshots are equal.  The control
    directory is left out while it holds only control files.
    """
    entries = {}
    inodes: dict[tuple[int, int], list[str]] = {}
    for rel, st in walk(root):
        ftype = _ftype(st)
        p = os.path.join(root, rel)
        if ftype == "regular":
            with open(p, "rb") as f:
                body = f.read()
            if st.st_nlink > 1:
                inodes.setdefault((st.st_dev, st.st_ino), []).append(rel)
        elif ftype == "symlink":
            body = os.readlink(p)
        else:
            body = None
        mode = None if ftype == "symlink" else stat.S_IMODE(st.st_mode)
        entries[rel] = (ftype, body, mode, st.st_mtime_ns)
    if CONTROL_DIR in entries and not any(r.startswith(CONTROL_DIR + "/") for r in entries):
        del entries[CONTROL_DIR]
    links = sorted(tuple(m) for m in inodes.values() if len(m) > 1)
    return {"entries": entries, "links": links}


def _depth(rel: str) -> int:
    return rel.count("/")


def _renamed(name: str) -> str:
    return RENAMED_PREFIX + name[len(GIT_PREFIX):]


def _set_meta(path: str, rec: FileRecord):
    if rec.ftype != "symlink":
        os.chmod(path, rec.mode)
    os.utime(path, ns=(rec.mtime, rec.mtime), follow_symlinks=False)


@dataclass
class Worktree:
    """Checked-out image directory bound to the cache repository.

    ``head`` names the commit the directory currently equals; it is cleared
    whenever the directory is about to diverge (instruction execution).
    """

    name: str
    path: Path
    index: Path
    head_file: Path

    @property
    def head(self) -> str | None:
        try:
            return self.head_file.read_text().strip() or None
        except FileNotFoundError:
            return None

    @head.setter
    def head(self, commit: str | None):
        if commit is None:
            with contextlib.suppress(FileNotFoundError):
                self.head_file.unlink()
        else:
            tmp = self.head_file.with_suffix(".tmp")
            tmp.write_text(commit + "\n")
            os.replace(tmp, self.head_file)

    def read_metadata(self) -> ImageMetadata:
        try:
            return ImageMetadata.loads((self.path / METADATA_PATH).read_bytes())
        except FileNotFoundError:
            return ImageMetadata()

    def write_metadata(self, meta: ImageMetadata):
        (self.path / CONTROL_DIR).mkdir(exist_ok=True)
        (self.path / METADATA_PATH).write_bytes(meta.dumps())


@dataclass
class CommitResult:
    commit: str
    manifest: MetadataManifest
    hashed: dict = field(default_factory=dict)  # path -> bytes Git had to hash

    @property
    def hashed_bytes(self) -> int:
        return sum(self.hashed.values())


@dataclass
class CompactReport:
    bytes_before: int
    bytes_after: int
    seconds: float
    nodes_removed: int = 0
    oob_removed: int = 0


def du(path: Path) -> int:
    total = 0
    seen = set()
    for dirpath, dirnames, filenames in os.walk(path):
        for name in dirnames + filenames:
            try:
                st = os.lstat(os.path.join(dirpath, name))
            except FileNotFoundError:
                continue
            if (st.st_dev, st.st_ino) in seen:
                continue
            seen.add((st.st_dev, st.st_ino))
            total += st.st_blocks * 512
    return total


class _Prepared:
    """Undo log of the pre-commit transformation."""

    def __init__(self, root: Path, large: oob.LargeFileStore):
        self.root = root
        self.large = large
        self.manifest = MetadataManifest()
        self.removed_links: list[tuple[str, str]] = []  # (member, canonical)
        self.stashed: list[tuple[str, str]] = []  # (path, key)
        self.removed_fifos: list[FileRecord] = []
        self.removed_dirs: list[FileRecord] = []
        self.renamed: list[tuple[str, str]] = []  # (stored, original), deepest first
        self.dirs: list[FileRecord] = []

    def p(self, rel: str) -> str:
        return os.path.join(self.root, rel)

    def restore(self):
        """Return the worktree to the image's own view."""
        for stored, original in self.renamed:
            parent = os.path.dirname(stored)
            os.rename(self.p(stored), self.p(os.path.join(parent, os.path.basename(original))))
        self.renamed = []
        for rec in sorted(self.removed_dirs, key=lambda r: _depth(r.path)):
            os.makedirs(self.p(rec.path), exist_ok=True)
        for rec in self.removed_fifos:
            if not os.path.lexists(self.p(rec.path)):
                os.mkfifo(self.p(rec.path))
            _set_meta(self.p(rec.path), rec)
        for path, key in self.stashed:
            self.large.restore(key, Path(self.p(path)))
        for member, canonical in self.removed_links:
            if not os.path.lexists(self.p(member)):
                os.link(self.p(canonical), self.p(member))
        for rec in sorted(self.dirs, key=lambda r: -_depth(r.path)):
            if os.path.isdir(self.p(rec.path)):
                _set_meta(self.p(rec.path), rec)


class Store:
    def __init__(self, storage_dir: Path):
        self.dir = Path(storage_dir).expanduser().absolute()
        self.bucache = self.dir / "bucache"
        self.img = self.dir / "img"
        self.dlcache = self.dir / "dlcache"
        self.bularge = self.dir / "bularge"
        self.git = Git(self.bucache)
        self.large = oob.LargeFileStore(self.bularge)
        self._private = self.bucache / "flatcache"
        self._lock_fd: int | None = None
        self._tree: CacheTree | None = None

    # setup

    @property
    def tree_path(self) -> Path:
        return self._private / "tree"

    def is_valid(self) -> bool:
        return all((self.dir / d).is_dir() for d in SUBDIRS) and \
            (self.bucache / "HEAD").exists() and self.tree_path.exists()

    @classmethod
    def init(cls, storage_dir) -> "Store":
        """Open ``storage_dir``, creating an empty store if needed."""
        store = cls(storage_dir)
        if store.dir.exists() and not store.dir.is_dir():
            raise StoreError(f"{store.dir} exists and is not a directory")
        if store.is_valid():
            return store
        if store.dir.exists() and set(os.listdir(store.dir)) - {"lock"}:
            raise StoreError(f"{store.dir} is not a valid storage directory; "
                             "run `flatcache reset` to start over")
        if git_version() < MIN_VERSION:
            raise StoreError("git >= %d.%d required" % MIN_VERSION)
        store.dir.mkdir(parents=True, exist_ok=True)
        with store.lock():
            if store.is_valid():
                return store
            for d in ("img", "dlcache", "bularge"):
                (store.dir / d).mkdir(exist_ok=True)
            store.git.init_bare()
            store._private.mkdir(exist_ok=True)
            (store._private / "worktrees").mkdir(exist_ok=True)
            commit = store._root_commit()
            store._tree = CacheTree.create(commit, store.tree_path, store.git)
        return store

    def _root_commit(self) -> str:
        def blob(data: bytes) -> str:
            return self.git.run("hash-object", "-w", "--stdin", input=data).decode().strip()

        meta = blob(ImageMetadata().dumps())
        manifest = blob(MetadataManifest().dumps())
        ch = self.git.run("mktree", input=(
            f"100644 blob {manifest}\tgit-meta\n100644 blob {meta}\tmetadata.json\n").encode())
        top = self.git.run("mktree", input=f"040000 tree {ch.decode().strip()}\tch\n".encode())
        return self.git.commit_tree(top.decode().strip(), None,
                                    f"ROOT\n\nstate {root_id().hex} seq 0")

    @property
    def tree(self) -> CacheTree:
        if self._tree is None:
            self._tree = CacheTree.load(self.tree_path, self.git)
        return self._tree

    def reload(self):
        self._tree = None

    # locking

    @contextlib.contextmanager
    def lock(self, exclusive: bool = True, timeout: float = 60.0):
        """Storage-wide advisory lock; re-entrant within one Store."""
        if self._lock_fd is not None:
            yield
            return
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.dir / "lock"
        fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
        mode = fcntl.LOCK_EX if exclusive else fcntl.LOCK_SH
        deadline = time.monotonic() + timeout
        while True:
            try:
                fcntl.flock(fd, mode | fcntl.LOCK_NB)
                break
            except BlockingIOError:
                if time.monotonic() >= deadline:
                    holder = os.pread(fd, 64, 0).decode(errors="replace").strip() or "?"
                    os.close(fd)
                    raise LockError(f"storage directory {self.dir} is locked by PID {holder}")
                time.sleep(0.05)
        if exclusive:
            os.ftruncate(fd, 0)
            os.pwrite(fd, f"{os.getpid()}\n".encode(), 0)
            self._clear_stale_git_locks()
        self._lock_fd = fd
        self._tree = None
        try:
            yield
        finally:
            self._lock_fd = None
            os.close(fd)

    def _clear_stale_git_locks(self):
        # We hold the storage lock, so any git *.lock left behind belongs to
        # a killed process.
        if not self.bucache.is_dir():
            return
        for dirpath, dirnames, filenames in os.walk(self.bucache):
            if os.path.basename(dirpath) == "objects":
                dirnames[:] = [d for d in dirnames if d in ("pack", "info")]
            for name in filenames:
                if name.endswith(".lock"):
                    log.warning("removing stale git lock %s", os.path.join(dirpath, name))
                    with contextlib.suppress(FileNotFoundError):
                        os.unlink(os.path.join(dirpath, name))

    # worktrees

    def worktree(self, name: str) -> Worktree:
        if not name or "/" in name or name.startswith("."):
            raise UsageError(f"invalid image name {name!r}")
        wt_dir = self._private / "worktrees"
        wt_dir.mkdir(exist_ok=True)
        return Worktree(name, self.img / name, wt_dir / f"{name}.index", wt_dir / f"{name}.head")

    def images(self) -> list[str]:
        return sorted(p.name for p in self.img.iterdir()) if self.img.is_dir() else []

    def checkout_state(self, node: CacheNode, image: str) -> Worktree:
        """Materialize ``node`` into the worktree of ``image``."""
        wt = self.worktree(image)
        if wt.head == node.commit_ref and wt.path.is_dir():
            return wt
        wt.head = None
        _rmtree(wt.path)
        wt.path.mkdir(parents=True)
        with contextlib.suppress(FileNotFoundError):
            wt.index.unlink()
        self.git.run("read-tree", node.commit_ref, work_tree=wt.path, index=wt.index)
        self.git.run("checkout-index", "-a", "-f", work_tree=wt.path, index=wt.index)
        try:
            manifest = MetadataManifest.loads((wt.path / MANIFEST_PATH).read_bytes())
        except FileNotFoundError:
            raise CorruptionError(f"commit {node.commit_ref} has no {MANIFEST_PATH}") from None
        self._apply_manifest(wt.path, manifest)
        wt.head = node.commit_ref
        return wt

    def _apply_manifest(self, root: Path, m: MetadataManifest):
        def p(rel):
            return os.path.join(root, rel)

        for stored, original in sorted(m.renames, key=lambda r: -_depth(r[0])):
            parent = os.path.dirname(stored)
            os.rename(p(stored), p(os.path.join(parent, os.path.basename(original))))
        for rel in sorted(m.empty_dirs, key=_depth):
            os.makedirs(p(rel), exist_ok=True)
        for rel in m.fifos:
            os.mkfifo(p(rel))
        for rel, key in m.large_files:
            self.large.restore(key, Path(p(rel)))
        for canonical, members in m.hardlink_groups:
            for member in members:
                os.link(p(canonical), p(member))
        dirs = []
        for rec in m.files:
            if rec.ftype == "directory":
                dirs.append(rec)
            else:
                _set_meta(p(rec.path), rec)
        for rec in sorted(dirs, key=lambda r: -_depth(r.path)):
            _set_meta(p(rec.path), rec)

    # commit

    def _prepare(self, prep: _Prepared, threshold: int | None):
        root = prep.root
        m = prep.manifest
        entries = walk(root)
        inodes: dict[tuple[int, int], list[str]] = {}
        for rel, st in entries:
            ftype = _ftype(st)
            if ftype in ("socket", "device"):
                raise StoreError(f"/{rel}: {ftype} files cannot be stored in an image")
            if os.path.basename(rel).startswith(RENAMED_PREFIX):
                raise StoreError(f"/{rel}: name collides with the {RENAMED_PREFIX} "
                                 f"rename of {GIT_PREFIX}* files")
            rec = FileRecord(rel, ftype, stat.S_IMODE(st.st_mode), st.st_mtime_ns)
            m.files.append(rec)
            if ftype == "directory":
                prep.dirs.append(rec)
            elif ftype == "regular" and st.st_nlink > 1:
                inodes.setdefault((st.st_dev, st.st_ino), []).append(rel)
        stats = dict(entries)
        records = {r.path: r for r in m.files}

        # hard links: keep the first member encountered
        gone = set()
        for members in inodes.values():
            if len(members) < 2:
                continue
            canonical, rest = members[0], members[1:]
            m.hardlink_groups.append((canonical, rest))
            for member in rest:
                os.unlink(prep.p(member))
                prep.removed_links.append((member, canonical))
                gone.add(member)

        # large files go out of band
        for rel, st in entries:
            if rel in gone or not oob.is_large(st, threshold):
                continue
            key = oob.oob_key(rel, st)
            self.large.stash(Path(prep.p(rel)), key)
            prep.stashed.append((rel, key))
            m.large_files.append((rel, key))
            gone.add(rel)

        # named pipes, then directories left empty (deepest first)
        for rel, st in entries:
            if stat.S_ISFIFO(st.st_mode):
                os.unlink(prep.p(rel))
                prep.removed_fifos.append(records[rel])
                m.fifos.append(rel)
                gone.add(rel)
        for rec in reversed(prep.dirs):
            if not os.listdir(prep.p(rec.path)):
                os.rmdir(prep.p(rec.path))
                prep.removed_dirs.append(rec)
                m.empty_dirs.append(rec.path)
                gone.add(rec.path)

        # .git* names, deepest first so parents are renamed last
        for rel in sorted((r for r in stats if r not in gone),
                          key=lambda r: (-_depth(r), r)):
            name = os.path.basename(rel)
            if not name.startswith(GIT_PREFIX):
                continue
            parent = os.path.dirname(rel)
            os.rename(prep.p(rel), prep.p(os.path.join(parent, _renamed(name))))
            stored = "/".join(_renamed(c) if c.startswith(GIT_PREFIX) else c
                              for c in rel.split("/"))
            prep.renamed.append((stored, rel))
            m.renames.append((stored, rel))

    def _hashed_files(self, wt: Worktree) -> dict[str, int]:
        """Files Git will have to read to hash this commit (new or stat-dirty)."""
        out = self.git.run("ls-files", "-z", "--others", "--modified",
                           work_tree=wt.path, index=wt.index)
        sizes = {}
        for rel in set(out.split(b"\0")):
            if not rel:
                continue
            try:
                st = os.lstat(os.path.join(os.fsencode(wt.path), rel))
            except FileNotFoundError:
                continue
            if stat.S_ISREG(st.st_mode):
                sizes[os.fsdecode(rel)] = st.st_size
        return sizes

    def commit_state(self, wt: Worktree, state_id: StateID, message: str,
                     threshold: int | None = oob.DEFAULT_THRESHOLD,
                     parent: str | None = None) -> CommitResult:
        """Commit the worktree's full content; the worktree is left as it was."""
        if not (wt.path / METADATA_PATH).exists():
            wt.write_metadata(ImageMetadata())
        prep = _Prepared(wt.path, self.large)
        wt.head = None
        try:
            self._prepare(prep, threshold)
            (wt.path / MANIFEST_PATH).write_bytes(prep.manifest.dumps())
            hashed = self._hashed_files(wt)
            self.git.run("add", "-A", "-f", "--", ".", work_tree=wt.path, index=wt.index)
            tree = self.git.text("write-tree", work_tree=wt.path, index=wt.index)
            commit = self.git.commit_tree(tree, parent, f"{message}\n\nstate {state_id.hex}")
        finally:
            prep.restore()
        wt.head = commit
        return CommitResult(commit, prep.manifest, hashed)

    def commit_metadata_only(self, wt: Worktree, meta: ImageMetadata, state_id: StateID,
                             message: str, parent: str) -> CommitResult:
        """Commit a change to container metadata alone (ENV, ARG, WORKDIR)."""
        if wt.head != parent:
            self.git.run("read-tree", parent, work_tree=wt.path, index=wt.index)
        wt.write_metadata(meta)
        self.git.run("add", "-f", "--", METADATA_PATH, work_tree=wt.path, index=wt.index)
        tree = self.git.text("write-tree", work_tree=wt.path, index=wt.index)
        commit = self.git.commit_tree(tree, parent, f"{message}\n\nstate {state_id.hex}")
        wt.head = commit
        manifest = self.read_manifest(commit)
        return CommitResult(commit, manifest)

    def read_manifest(self, commit: str) -> MetadataManifest:
        data = self.git.read_blobs([f"{commit}:{MANIFEST_PATH}"])[0]
        if data is None:
            raise CorruptionError(f"commit {commit} has no {MANIFEST_PATH}")
        return MetadataManifest.loads(data)

    def read_metadata(self, commit: str) -> ImageMetadata:
        data = self.git.read_blobs([f"{commit}:{METADATA_PATH}"])[0]
        return ImageMetadata.loads(data) if data is not None else ImageMetadata()

    # maintenance

    def delete_image(self, name: str) -> bool:
        wt = self.worktree(name)
        found = self.tree.delete_label(name)
        if wt.path.exists():
            _rmtree(wt.path)
            found = True
        wt.head = None
        with contextlib.suppress(FileNotFoundError):
            wt.index.unlink()
        return found

    def live_oob_keys(self, nodes) -> set[str]:
        specs = [f"{n.commit_ref}:{MANIFEST_PATH}" for n in nodes]
        keys = set()
        for data in self.git.read_blobs(specs):
            if data is not None:
                keys.update(k for _, k in MetadataManifest.loads(data).large_files)
        return keys

    def compact(self) -> CompactReport:
        """Drop states no label reaches, their large files, and let Git repack.

        Every step leaves a valid store if the process is killed: the tree
        index is replaced atomically before refs and files are removed.
        """
        start = time.monotonic()
        before = du(self.bucache) + du(self.bularge)
        tree = self.tree
        live = tree.reachable()
        doomed = set(tree.nodes.values()) - live
        tree.remove_nodes(doomed)
        removed_oob = self.large.gc(self.live_oob_keys(live))
        self.git.run("gc", "--quiet", "--prune=now", die_with_parent=True)
        after = du(self.bucache) + du(self.bularge)
        return CompactReport(before, after, time.monotonic() - start, len(doomed), removed_oob)

    def validate(self) -> list[str]:
        """Consistency problems found, empty if the store is sound."""
        problems = []
        if not self.is_valid():
            return [f"{self.dir} is not a valid storage directory"]
        try:
            tree = CacheTree.load(self.tree_path)
        except CorruptionError as e:
            return [str(e)]
        missing = self.git.missing_objects(n.commit_ref for n in tree.nodes.values())
        for n in tree.nodes.values():
            if n.commit_ref in missing:
                problems.append(f"node {n.seq} ({n.state_id.abbrev}): commit {n.commit_ref} missing")
        if not missing:
            present = self.large.keys()
            for key in self.live_oob_keys(tree.nodes.values()):
                if key not in present:
                    problems.append(f"large file {key} missing")
        try:
            self.git.run("fsck", "--connectivity-only", "--no-dangling")
        except StoreError as e:
            problems.append(str(e))
        return problems

    def reset(self):
        _rmtree(self.dir)


def spawn_detached_compaction(storage_dir: Path) -> subprocess.Popen:
    """Run compaction in a background process group that may be killed at any time."""
    return subprocess.Popen(
        [sys.executable, "-m", "flatcache.cli", "--storage", str(storage_dir), "gc"],
        stdin=subprocess.DEVNULL, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
        start_new_session=True,
    )
