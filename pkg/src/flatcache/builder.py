"""Pull and build orchestration.

A build is a run of cache hits followed by a run of misses.  Only the last
hit is checked out; each miss is executed in the image's worktree and
committed as a child of the previous state.
"""

from __future__ import annotations

import logging
import os
import posixpath
import shutil
import subprocess
import tarfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from flatcache import oob
from flatcache.digest import (
    DEFAULT_EXCLUDED,
    DigestContext,
    StateID,
    copy_sources,
    digest_input_for,
    pull_input,
    root_id,
    state_id,
)
from flatcache.errors import BuildError, FlatcacheError, UsageError
from flatcache.layers import DownloadCache, ImageSource, LayoutSource, RegistrySource, apply_layer
from flatcache.meta import ImageMetadata
from flatcache.recipe import ImageRef, Instruction, parse, sanitize
from flatcache.store import Store, Worktree, _rmtree
from flatcache.tree import CacheNode

log = logging.getLogger(__name__)

HIT = "hit"
MISS = "miss-executed"
IGNORED = "ignored"


@dataclass
class BuildOptions:
    rebuild: bool = False
    no_cache: bool = False
    threshold: int | None = oob.DEFAULT_THRESHOLD
    build_args: dict = field(default_factory=dict)
    context_dir: Path = Path(".")
    excluded: frozenset = DEFAULT_EXCLUDED
    shell: tuple = ("/bin/sh", "-c")


@dataclass
class InstructionRecord:
    text: str
    state_id: StateID | None
    outcome: str
    duration: float = 0.0
    line: int = 0


@dataclass
class BuildReport:
    image: str
    records: list[InstructionRecord] = field(default_factory=list)
    final: CacheNode | None = None
    hashed: dict = field(default_factory=dict)  # path -> bytes hashed by Git, summed

    @property
    def hashed_bytes(self) -> int:
        return sum(self.hashed.values())

    @property
    def hits(self) -> int:
        return sum(r.outcome == HIT for r in self.records)

    @property
    def misses(self) -> int:
        return sum(r.outcome == MISS for r in self.records)

    @property
    def executed(self) -> int:
        return self.misses


@dataclass
class Plan:
    hits: list[CacheNode]
    first_miss: int
    ids: list[StateID | None]
    metas: list[ImageMetadata]


def _apply_meta(ins: Instruction, meta: ImageMetadata) -> ImageMetadata:
    """Container metadata after a metadata instruction."""
    meta = meta.copy()
    if ins.kind == "ARG":
        for name, value in ins.args:
            if value is not None:
                meta.arg_values[name] = value
    elif ins.kind == "ENV":
        for name, value in ins.args:
            meta.environment[name] = value
    elif ins.kind == "WORKDIR":
        meta.workdir = posixpath.normpath(posixpath.join(meta.workdir, ins.args))
    return meta


def _inside(root: Path, rel: str) -> Path:
    root = Path(os.path.realpath(root))
    p = Path(os.path.realpath(root / rel.lstrip("/")))
    if p != root and root not in p.parents:
        raise BuildError(f"path escapes image root: {rel}")
    return p


class Builder:
    def __init__(self, store: Store, source: ImageSource | None = None,
                 platform: str = "linux/amd64"):
        self.store = store
        self.source = source
        self.platform = platform

    # sources

    def layout_source(self, layout_dir) -> LayoutSource:
        return LayoutSource(layout_dir, DownloadCache(self.store.dlcache), self.platform)

    def registry_source(self, url) -> RegistrySource:
        return RegistrySource(url, DownloadCache(self.store.dlcache), self.platform)

    # pull

    def pull(self, ref: ImageRef | str, source: ImageSource | None = None,
             rebuild: bool = False, threshold: int | None = oob.DEFAULT_THRESHOLD) -> CacheNode:
        """Fetch a base image's manifest; unpack and commit it only on a miss."""
        ref = ImageRef.parse(ref) if isinstance(ref, str) else ref
        source = source or self.source
        if source is None:
            raise UsageError(f"no image source configured to pull {ref}; "
                             "use --from-layout or set a registry")
        tree = self.store.tree
        manifest = source.fetch_manifest(ref)
        sid = state_id(root_id(), pull_input(manifest.raw_bytes))
        name = ref.branch
        hit = tree.find_hit(sid, name, rebuild)
        if hit is not None:
            log.info("pull %s: cache hit %s", ref, sid.abbrev)
            self.store.checkout_state(hit, name)
            tree.move_label(name, hit)
            return hit
        config = source.config(manifest)
        layers = source.layers(manifest)
        wt = self.store.worktree(name)
        wt.head = None
        _rmtree(wt.path)
        wt.path.mkdir(parents=True)
        for layer in layers:
            apply_layer(layer, wt.path)
        cfg = config.get("config") or {}
        env = dict(e.split("=", 1) for e in cfg.get("Env") or [] if "=" in e)
        wt.write_metadata(ImageMetadata(environment=env, workdir=cfg.get("WorkingDir") or "/"))
        text = f"PULL {ref}"
        result = self.store.commit_state(wt, sid, text, threshold, tree.root.commit_ref)
        node = tree.add_node(tree.root, sid, text, result.commit, rebuild=True)
        tree.move_label(name, node)
        return node

    def import_tarball(self, tar_path: Path, name: str,
                       threshold: int | None = oob.DEFAULT_THRESHOLD) -> CacheNode:
        """Use a flat tarball as a base image; its digest plays the manifest's role."""
        from flatcache.layers import _file_digest

        digest = _file_digest(Path(tar_path))
        sid = state_id(root_id(), pull_input(digest.encode()))
        tree = self.store.tree
        branch = sanitize(name)
        hit = next((c for c in tree.root.children if c.state_id == sid), None)
        if hit is not None:
            tree.move_label(branch, hit)
            return hit
        wt = self.store.worktree(branch)
        wt.head = None
        _rmtree(wt.path)
        wt.path.mkdir(parents=True)
        try:
            apply_layer(Path(tar_path), wt.path)
        except tarfile.TarError as e:
            raise FlatcacheError(f"{tar_path}: not a readable tarball: {e}") from None
        text = f"IMPORT {Path(tar_path).name}"
        result = self.store.commit_state(wt, sid, text, threshold, tree.root.commit_ref)
        node = tree.add_node(tree.root, sid, text, result.commit, rebuild=True)
        tree.move_label(branch, node)
        return node

    # build

    def resolve_base(self, ins: Instruction | None, opts: BuildOptions) -> CacheNode:
        """Base state for FROM: a labeled image as-is (no freshness check),
        otherwise a pull.  Rebuild mode re-pulls when a source is available."""
        tree = self.store.tree
        if ins is None or ins.args == "scratch":
            return tree.root
        text = ins.args
        ref = ImageRef.parse(text)
        labeled = tree.labels.get(sanitize(text)) or tree.labels.get(ref.branch)
        if labeled is not None and not (opts.rebuild and self.source is not None):
            return labeled
        if self.source is None:
            raise BuildError(f"base image {text} not found; pull or import it first")
        try:
            return self.pull(ref, rebuild=opts.rebuild, threshold=opts.threshold)
        except FlatcacheError as e:
            if labeled is not None:
                return labeled
            raise BuildError(f"base image {text} not found ({e}); pull or import it first") \
                from e

    def plan(self, instructions: list[Instruction], base: CacheNode, image: str,
             opts: BuildOptions, base_meta: ImageMetadata) -> Plan:
        """Walk instructions until the first miss.

        ``metas[i]`` is the container metadata *before* instruction i.
        """
        tree = self.store.tree
        ctx = DigestContext(context_dir=opts.context_dir, excluded=opts.excluded)
        hits: list[CacheNode] = []
        ids: list[StateID | None] = []
        metas: list[ImageMetadata] = []
        parent = base
        meta = base_meta
        first_miss = len(instructions)
        for i, ins in enumerate(instructions):
            metas.append(meta)
            dinput = digest_input_for(ins, ctx)
            if dinput is None:
                ids.append(None)
                continue
            sid = state_id(parent.state_id, dinput)
            ids.append(sid)
            node = tree.find_hit(sid, image, opts.rebuild)
            if node is None:
                first_miss = i
                break
            hits.append(node)
            parent = node
            meta = _apply_meta(ins, meta)
        return Plan(hits, first_miss, ids, metas)

    def build(self, recipe: str, image: str, opts: BuildOptions | None = None) -> BuildReport:
        opts = opts or BuildOptions()
        instructions = parse(recipe, opts.build_args)
        name = sanitize(image)
        report = BuildReport(name)
        start = 0
        from_ins = None
        if instructions[0].kind == "FROM":
            from_ins, start = instructions[0], 1
        base = self.resolve_base(from_ins, opts)
        base_meta = self.store.read_metadata(base.commit_ref)
        body = instructions[start:]
        for ins in body:
            if ins.kind == "COPY":
                copy_sources(opts.context_dir, ins.args["sources"])

        if opts.no_cache:
            return self._build_uncached(body, base, name, base_meta, opts, report)

        plan = self.plan(body, base, name, opts, base_meta)
        for ins, sid in zip(body[: plan.first_miss], plan.ids):
            outcome = IGNORED if sid is None else HIT
            report.records.append(InstructionRecord(ins.text, sid, outcome, 0.0, ins.line))
        last = plan.hits[-1] if plan.hits else base
        tree = self.store.tree
        if plan.first_miss == len(body):
            wt = self.store.checkout_state(last, name)
            tree.move_label(name, last)
            report.final = last
            return report

        wt = self.store.checkout_state(last, name)
        meta = plan.metas[plan.first_miss].copy()
        ctx = DigestContext(context_dir=opts.context_dir, excluded=opts.excluded)
        parent = last
        for ins in body[plan.first_miss:]:
            t0 = time.monotonic()
            dinput = digest_input_for(ins, ctx)
            if dinput is None:
                report.records.append(InstructionRecord(ins.text, None, IGNORED, 0.0, ins.line))
                continue
            sid = state_id(parent.state_id, dinput)
            new_meta = self.execute_instruction(ins, wt, meta, opts, parent)
            message = ins.text
            if ins.kind in ("ENV", "ARG", "WORKDIR"):
                result = self.store.commit_metadata_only(wt, new_meta, sid, message,
                                                         parent.commit_ref)
            else:
                result = self.store.commit_state(wt, sid, message, opts.threshold,
                                                 parent.commit_ref)
                for path, size in result.hashed.items():
                    report.hashed[path] = report.hashed.get(path, 0) + size
            parent = tree.add_node(parent, sid, ins.text, result.commit, rebuild=opts.rebuild)
            meta = new_meta
            report.records.append(InstructionRecord(ins.text, sid, MISS,
                                                    time.monotonic() - t0, ins.line))
        tree.move_label(name, parent)
        report.final = parent
        return report

    def _build_uncached(self, body, base, name, meta, opts, report) -> BuildReport:
        wt = self.store.checkout_state(base, name)
        wt.head = None
        for ins in body:
            t0 = time.monotonic()
            if ins.ignored:
                report.records.append(InstructionRecord(ins.text, None, IGNORED, 0.0, ins.line))
                continue
            meta = self.execute_instruction(ins, wt, meta, opts, None)
            if ins.kind in ("ENV", "WORKDIR"):
                wt.write_metadata(meta)
            report.records.append(InstructionRecord(ins.text, None, MISS,
                                                    time.monotonic() - t0, ins.line))
        return report

    def _unshare_large_files(self, wt: Worktree, parent: CacheNode | None):
        """Copy-on-write for out-of-band files linked into the worktree, so a
        RUN that writes one cannot alter the stored copy."""
        if parent is None:
            return
        manifest = self.store.read_manifest(parent.commit_ref)
        groups = dict(manifest.hardlink_groups)
        for path, key in manifest.large_files:
            if not self.store.large.break_link(key, wt.path / path):
                continue
            # hard links to the stored copy follow the fresh inode
            for member in groups.get(path, []):
                tmp = wt.path / f"{member}.oob-relink"
                os.link(wt.path / path, tmp)
                os.rename(tmp, wt.path / member)

    def execute_instruction(self, ins: Instruction, wt: Worktree, meta: ImageMetadata,
                            opts: BuildOptions, parent: CacheNode | None = None) -> ImageMetadata:
        """Carry out one instruction in the worktree; returns the new metadata."""
        if ins.kind in ("ARG", "ENV", "WORKDIR"):
            return _apply_meta(ins, meta)
        wt.head = None
        if ins.kind == "RUN":
            self._unshare_large_files(wt, parent)
            cwd = _inside(wt.path, meta.workdir)
            cwd.mkdir(parents=True, exist_ok=True)
            env = meta.build_environment()
            env.setdefault("PATH", os.environ.get("PATH", os.defpath))
            env["IMAGE_ROOT"] = str(wt.path)
            proc = subprocess.run([*opts.shell, ins.args], cwd=cwd, env=env,
                                  stdin=subprocess.DEVNULL, stdout=subprocess.PIPE,
                                  stderr=subprocess.STDOUT)
            output = proc.stdout.decode(errors="replace")
            if output:
                log.info("%s", output.rstrip())
            if proc.returncode != 0:
                raise BuildError(f"line {ins.line}: {ins.text}: exit status {proc.returncode}",
                                 output)
            return meta
        if ins.kind == "COPY":
            self._copy(ins, wt, meta, opts)
            return meta
        raise UsageError(f"cannot execute {ins.kind}")

    def _copy(self, ins: Instruction, wt: Worktree, meta: ImageMetadata, opts: BuildOptions):
        sources = copy_sources(opts.context_dir, ins.args["sources"])
        dest_text = ins.args["dest"]
        dest_rel = posixpath.join(meta.workdir, dest_text)
        dest = _inside(wt.path, dest_rel)
        into_dir = dest_text.endswith("/") or len(sources) > 1 or dest.is_dir()
        for src in sources:
            if src.is_dir() and not src.is_symlink():
                dest.mkdir(parents=True, exist_ok=True)
                shutil.copytree(src, dest, symlinks=True, dirs_exist_ok=True)
                shutil.copystat(src, dest)
                continue
            target = dest / src.name if into_dir else dest
            target.parent.mkdir(parents=True, exist_ok=True)
            _inside(wt.path, os.path.relpath(target, wt.path))
            if os.path.lexists(target) and not target.is_dir():
                target.unlink()
            shutil.copy2(src, target, follow_symlinks=False)
