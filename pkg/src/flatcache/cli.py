"""Command-line interface.

Image names map to Git branch names by replacing ``:`` with ``+`` and ``/``
with ``%``; ``tree`` and ``list`` show the branch form.

Exit status: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import shlex
import sys
import traceback
from dataclasses import dataclass
from pathlib import Path

from flatcache import oob
from flatcache.builder import BuildOptions, Builder
from flatcache.digest import DEFAULT_EXCLUDED
from flatcache.errors import FlatcacheError, UsageError
from flatcache.layers import DownloadCache, LayoutSource, RegistrySource
from flatcache.recipe import sanitize
from flatcache.store import Store, spawn_detached_compaction

log = logging.getLogger("flatcache")

DEFAULT_STORAGE = "~/.flatcache"
DEFAULT_CONFIG = "~/.config/flatcache/config.ini"


@dataclass
class Config:
    storage_dir: Path = Path(DEFAULT_STORAGE).expanduser()
    threshold_mib: int = 4
    excluded_args: frozenset = DEFAULT_EXCLUDED
    platform: str = "linux/amd64"
    registry: str | None = None
    layout: Path | None = None
    lock_timeout: float = 60.0
    runner: tuple = ("/bin/sh", "-c")  # RUN argument is appended

    @property
    def threshold(self) -> int | None:
        return self.threshold_mib * oob.MiB if self.threshold_mib > 0 else None

    @classmethod
    def load(cls, args: argparse.Namespace, environ=os.environ) -> "Config":
        """Flags beat environment, which beats the config file, which beats defaults."""
        cfg = cls()
        path = Path(environ.get("FLATCACHE_CONFIG", DEFAULT_CONFIG)).expanduser()
        if path.exists():
            parser = configparser.ConfigParser()
            parser.read(path)
            sec = parser["flatcache"] if parser.has_section("flatcache") else {}
            cfg._update(sec.get("storage"), sec.get("cache_large"), sec.get("excluded_args"),
                        sec.get("platform"), sec.get("registry"), sec.get("layout"),
                        sec.get("runner"))
        cfg._update(environ.get("FLATCACHE_STORAGE"), environ.get("FLATCACHE_CACHE_LARGE"),
                    environ.get("FLATCACHE_EXCLUDED_ARGS"), environ.get("FLATCACHE_PLATFORM"),
                    environ.get("FLATCACHE_REGISTRY"), environ.get("FLATCACHE_LAYOUT"),
                    environ.get("FLATCACHE_RUNNER"))
        cfg._update(getattr(args, "storage", None), getattr(args, "cache_large", None), None,
                    getattr(args, "platform", None), getattr(args, "registry", None), None)
        return cfg

    def _update(self, storage, cache_large, excluded, platform, registry, layout, runner=None):
        if storage:
            self.storage_dir = Path(storage).expanduser()
        if cache_large is not None and cache_large != "":
            try:
                self.threshold_mib = int(cache_large)
            except ValueError:
                raise UsageError(f"invalid large-file threshold {cache_large!r}") from None
            if self.threshold_mib < 0:
                raise UsageError("large-file threshold must be >= 0")
        if excluded:
            self.excluded_args = frozenset(n.strip() for n in excluded.split(",") if n.strip())
        if platform:
            self.platform = platform
        if registry:
            self.registry = registry
        if layout:
            self.layout = Path(layout).expanduser()
        if runner:
            self.runner = tuple(shlex.split(runner))

    def source(self, store: Store, layout: Path | None = None):
        dl = DownloadCache(store.dlcache)
        layout = layout or self.layout
        if layout:
            return LayoutSource(layout, dl, self.platform)
        if self.registry:
            return RegistrySource(self.registry, dl, self.platform)
        return None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_arg(text: str) -> tuple[str, str]:
    name, sep, value = text.partition("=")
    if not sep:
        value = os.environ.get(name)
        if value is None:
            raise argparse.ArgumentTypeError(f"--build-arg {name}: no value and not in environment")
    return name, value


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flatcache", description=(
        "Layer-free container image builder with a Git-based build cache. "
        "Image names are stored as branch names with ':' replaced by '+' and '/' by '%'."))
    p.add_argument("--storage", help="storage directory (env FLATCACHE_STORAGE, default "
                   f"{DEFAULT_STORAGE})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    b = sub.add_parser("build", help="build an image from a recipe")
    b.add_argument("-t", dest="name", required=True, help="image name")
    b.add_argument("-f", dest="file", help="recipe file (default: <context>/Dockerfile)")
    b.add_argument("--rebuild", action="store_true",
                   help="re-execute every instruction after FROM")
    b.add_argument("--no-cache", action="store_true", help="do not read or write the cache")
    b.add_argument("--cache-large", metavar="MiB", help="large-file threshold; 0 disables")
    b.add_argument("--build-arg", action="append", default=[], type=_build_arg,
                   metavar="NAME=VALUE")
    b.add_argument("--platform")
    b.add_argument("--registry", help="registry base URL for base images")
    b.add_argument("--from-layout", type=Path, help="OCI layout holding base images")
    b.add_argument("context", type=Path)

    pl = sub.add_parser("pull", help="pull a base image")
    pl.add_argument("ref")
    pl.add_argument("--from-layout", type=Path, help="OCI image layout directory")
    pl.add_argument("--registry")
    pl.add_argument("--platform")
    pl.add_argument("--cache-large", metavar="MiB")

    sub.add_parser("list", help="list image names")
    t = sub.add_parser("tree", help="show the cache tree")
    t.add_argument("--dot", action="store_true", help="emit Graphviz DOT")
    g = sub.add_parser("gc", help="compact the cache")
    g.add_argument("--detach", action="store_true", help="run in the background")
    d = sub.add_parser("delete", help="delete an image name")
    d.add_argument("name")
    r = sub.add_parser("reset", help="delete the whole storage directory")
    r.add_argument("-y", "--yes", action="store_true", help="do not ask for confirmation")
    i = sub.add_parser("import", help="use a flat tarball as a base image")
    i.add_argument("tarball", type=Path)
    i.add_argument("-t", dest="name", required=True)
    i.add_argument("--cache-large", metavar="MiB")
    return p


def run(args: argparse.Namespace, out=None) -> int:
    out = out or sys.stdout
    cfg = Config.load(args)
    if args.command == "reset":
        store = Store(cfg.storage_dir)
        if not store.dir.exists():
            return 0
        if not args.yes:
            if not sys.stdin.isatty():
                raise UsageError("refusing to reset without --yes")
            answer = input(f"delete {store.dir} and everything in it? [y/N] ")
            if answer.strip().lower() not in ("y", "yes"):
                return 1
        with store.lock():
            store.reset()
        return 0

    if args.command == "gc" and args.detach:
        Store.init(cfg.storage_dir)
        proc = spawn_detached_compaction(cfg.storage_dir)
        print(proc.pid, file=out)
        return 0

    store = Store.init(cfg.storage_dir)

    if args.command in ("list", "tree"):
        with store.lock(exclusive=False, timeout=cfg.lock_timeout):
            tree = store.tree
            if args.command == "list":
                for name in sorted(tree.labels):
                    print(name, file=out)
            else:
                out.write(tree.render_dot() if args.dot else tree.render())
        return 0

    with store.lock(timeout=cfg.lock_timeout):
        if args.command == "build":
            layout = args.from_layout
            builder = Builder(store, cfg.source(store, layout), cfg.platform)
            recipe_path = Path(args.file) if args.file else args.context / "Dockerfile"
            try:
                recipe = recipe_path.read_text("utf-8")
            except FileNotFoundError:
                raise UsageError(f"recipe not found: {recipe_path}") from None
            opts = BuildOptions(rebuild=args.rebuild, no_cache=args.no_cache,
                                threshold=cfg.threshold, build_args=dict(args.build_arg),
                                context_dir=args.context, excluded=cfg.excluded_args,
                                shell=cfg.runner)
            report = builder.build(recipe, args.name, opts)
            for rec in report.records:
                sid = rec.state_id.abbrev if rec.state_id else "----"
                print(f"{sid} {rec.outcome:<13} {rec.text}", file=out)
            print(f"{report.hits} hits, {report.misses} executed; "
                  f"image {sanitize(args.name)}", file=out)
        elif args.command == "pull":
            source = cfg.source(store, args.from_layout)
            if source is None:
                raise UsageError("no image source: give --from-layout or configure a registry")
            node = Builder(store, source, cfg.platform).pull(args.ref, threshold=cfg.threshold)
            print(f"{node.state_id.abbrev} {node.instruction_text}", file=out)
        elif args.command == "import":
            node = Builder(store).import_tarball(args.tarball, args.name, cfg.threshold)
            print(f"{node.state_id.abbrev} {node.instruction_text}", file=out)
        elif args.command == "delete":
            if not store.delete_image(sanitize(args.name)):
                raise UsageError(f"no image named {args.name}")
        elif args.command == "gc":
            r = store.compact()
            print(f"compacted: {r.bytes_before} -> {r.bytes_after} bytes, "
                  f"{r.nodes_removed} states and {r.oob_removed} large files removed, "
                  f"{r.seconds:.2f}s", file=out)
    return 0


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return run(args)
    except FlatcacheError as e:
        print(f"flatcache: error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
