"""Base-image ingestion: OCI manifests, blobs and layer tarballs.

Layers are a diff format; applying them in order onto an empty directory
yields the flat image.  Deletions are encoded as ``.wh.<name>`` entries and
``.wh..wh..opq`` marks a directory whose older contents are hidden.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import logging
import os
import shutil
import stat
import tarfile
from dataclasses import dataclass, field
from pathlib import Path

from flatcache.errors import FlatcacheError, IntegrityError, PathTraversalError
from flatcache.recipe import ImageRef

log = logging.getLogger(__name__)

WHITEOUT = ".wh."
OPAQUE = ".wh..wh..opq"

MANIFEST_TYPES = (
    "application/vnd.oci.image.manifest.v1+json",
    "application/vnd.docker.distribution.manifest.v2+json",
)
INDEX_TYPES = (
    "application/vnd.oci.image.index.v1+json",
    "application/vnd.docker.distribution.manifest.list.v2+json",
)
REF_ANNOTATION = "org.opencontainers.image.ref.name"


@dataclass
class Manifest:
    raw_bytes: bytes
    layer_digests: list[str]
    config_digest: str
    media_type: str = MANIFEST_TYPES[0]

    @classmethod
    def parse(cls, raw: bytes, media_type: str | None = None) -> "Manifest":
        try:
            doc = json.loads(raw)
            layers = [d["digest"] for d in doc.get("layers", [])]
            config = doc["config"]["digest"]
        except (ValueError, KeyError, TypeError) as e:
            raise IntegrityError(f"malformed image manifest: {e}") from None
        for d in layers + [config]:
            _check_digest_syntax(d)
        return cls(raw, layers, config, media_type or doc.get("mediaType", MANIFEST_TYPES[0]))


@dataclass
class LayerArchive:
    digest: str
    path: Path


@dataclass
class ChangeSummary:
    added: int = 0
    deleted: int = 0
    opaque: int = 0
    skipped: list[str] = field(default_factory=list)


def _check_digest_syntax(digest: str):
    algo, _, hexpart = digest.partition(":")
    if algo != "sha256" or len(hexpart) != 64 or any(c not in "0123456789abcdef" for c in hexpart):
        raise IntegrityError(f"unsupported or malformed digest {digest!r}")


def sha256_digest(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


# applying layers


def _member_path(name: str) -> str:
    """Image-relative path of a tar member; refuses anything escaping the root."""
    parts = []
    for part in name.replace("\\", "/").split("/"):
        if part in ("", "."):
            continue
        if part == "..":
            raise PathTraversalError(f"layer entry escapes image root: {name}")
        parts.append(part)
    if name.startswith("/"):
        raise PathTraversalError(f"layer entry has absolute path: {name}")
    return "/".join(parts)


def _remove(path: str):
    if os.path.isdir(path) and not os.path.islink(path):
        shutil.rmtree(path)
    elif os.path.lexists(path):
        os.unlink(path)


class _Target:
    def __init__(self, root: Path):
        self.root = os.path.realpath(root)

    def path(self, rel: str) -> str:
        """Absolute path for ``rel``; its parent must resolve inside the root."""
        full = os.path.join(self.root, rel)
        parent = os.path.realpath(os.path.dirname(full))
        if parent != self.root and not parent.startswith(self.root + os.sep):
            raise PathTraversalError(f"layer entry resolves outside image root: {rel}")
        return full

    def ensure_parent(self, rel: str):
        parent = os.path.dirname(rel)
        if parent:
            p = self.path(parent)
            if os.path.lexists(p) and not os.path.isdir(p):
                os.unlink(p)
            os.makedirs(p, exist_ok=True)
            self.path(rel)  # re-check now that the parent exists


def open_layer(path: Path) -> tarfile.TarFile:
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic == b"\x1f\x8b":
        return tarfile.open(fileobj=gzip.open(path, "rb"), mode="r|")
    return tarfile.open(path, mode="r|")


def apply_layer(archive: LayerArchive | Path, root: Path) -> ChangeSummary:
    """Extract one layer tarball onto ``root``, honoring whiteouts."""
    path = archive.path if isinstance(archive, LayerArchive) else Path(archive)
    target = _Target(root)
    summary = ChangeSummary()
    created: set[str] = set()  # paths written by this layer
    dir_meta: list[tuple[str, int, int]] = []
    with open_layer(path) as tar:
        for member in tar:
            rel = _member_path(member.name)
            if not rel:
                continue
            base = os.path.basename(rel)
            parent = os.path.dirname(rel)
            if base == OPAQUE:
                d = target.path(parent) if parent else target.root
                if os.path.isdir(d):
                    for name in os.listdir(d):
                        child = f"{parent}/{name}" if parent else name
                        if child not in created:
                            _remove(os.path.join(d, name))
                            summary.deleted += 1
                summary.opaque += 1
                continue
            if base.startswith(WHITEOUT):
                victim = (f"{parent}/" if parent else "") + base[len(WHITEOUT):]
                vp = target.path(victim)
                if os.path.lexists(vp):
                    _remove(vp)
                    summary.deleted += 1
                continue
            target.ensure_parent(rel)
            full = target.path(rel)
            if member.isdir():
                if os.path.lexists(full) and not os.path.isdir(full):
                    os.unlink(full)
                os.makedirs(full, exist_ok=True)
                dir_meta.append((full, member.mode, int(member.mtime)))
            else:
                if member.ischr() or member.isblk():
                    log.warning("skipping device file %s in layer", rel)
                    summary.skipped.append(rel)
                    continue
                if os.path.lexists(full):
                    _remove(full)
                if member.isreg():
                    src = tar.extractfile(member)
                    with open(full, "wb") as out:
                        shutil.copyfileobj(src, out)
                elif member.issym():
                    os.symlink(member.linkname, full)
                elif member.islnk():
                    link_src = target.path(_member_path(member.linkname))
                    os.link(link_src, full)
                elif member.isfifo():
                    os.mkfifo(full)
                else:
                    log.warning("skipping unsupported entry %s in layer", rel)
                    summary.skipped.append(rel)
                    continue
                if not member.islnk():
                    if not member.issym():
                        os.chmod(full, stat.S_IMODE(member.mode))
                    mt = int(member.mtime) * 1_000_000_000
                    os.utime(full, ns=(mt, mt), follow_symlinks=False)
            created.add(rel)
            summary.added += 1
    for full, mode, mtime in sorted(dir_meta, key=lambda d: -d[0].count(os.sep)):
        os.chmod(full, stat.S_IMODE(mode))
        os.utime(full, ns=(mtime * 1_000_000_000,) * 2)
    return summary


# image sources


class DownloadCache:
    """Verbatim manifests and blobs, one file per digest (``sha256-<hex>``)."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.copies = 0

    def path(self, digest: str) -> Path:
        _check_digest_syntax(digest)
        return self.root / digest.replace(":", "-")

    def has(self, digest: str) -> bool:
        return self.path(digest).exists()

    def put_bytes(self, digest: str, data: bytes) -> Path:
        if sha256_digest(data) != digest:
            raise IntegrityError(f"digest mismatch for {digest}")
        dest = self.path(digest)
        if not dest.exists():
            self.root.mkdir(parents=True, exist_ok=True)
            tmp = dest.with_name(f".tmp-{os.getpid()}-{dest.name}")
            tmp.write_bytes(data)
            os.replace(tmp, dest)
            self.copies += 1
        return dest

    def put_stream(self, digest: str, chunks) -> Path:
        dest = self.path(digest)
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = dest.with_name(f".tmp-{os.getpid()}-{dest.name}")
        h = hashlib.sha256()
        with open(tmp, "wb") as f:
            for chunk in chunks:
                h.update(chunk)
                f.write(chunk)
        if "sha256:" + h.hexdigest() != digest:
            tmp.unlink()
            raise IntegrityError(f"digest mismatch for {digest}")
        os.replace(tmp, dest)
        self.copies += 1
        return dest


def _select_platform(index: dict, platform: str) -> dict:
    want = platform.split("/")
    for desc in index.get("manifests", []):
        p = desc.get("platform", {})
        have = [p.get("os"), p.get("architecture")] + ([p["variant"]] if "variant" in p else [])
        if have[: len(want)] == want:
            return desc
    raise FlatcacheError(f"no manifest for platform {platform}")


class ImageSource:
    """Where base images come from.  Subclasses supply raw bytes by digest."""

    def __init__(self, dlcache: DownloadCache, platform: str = "linux/amd64"):
        self.dlcache = dlcache
        self.platform = platform

    def fetch_manifest(self, ref: ImageRef) -> Manifest:
        raise NotImplementedError

    def _blob_to_cache(self, digest: str) -> Path:
        raise NotImplementedError

    def blob(self, digest: str) -> Path:
        if self.dlcache.has(digest):
            return self.dlcache.path(digest)
        return self._blob_to_cache(digest)

    def layers(self, manifest: Manifest) -> list[LayerArchive]:
        return [LayerArchive(d, self.blob(d)) for d in manifest.layer_digests]

    def config(self, manifest: Manifest) -> dict:
        return json.loads(self.blob(manifest.config_digest).read_bytes())


class LayoutSource(ImageSource):
    """An OCI image layout directory (``index.json`` + ``blobs/sha256/``)."""

    def __init__(self, layout_dir: Path, dlcache: DownloadCache, platform: str = "linux/amd64"):
        super().__init__(dlcache, platform)
        self.dir = Path(layout_dir)
        try:
            self.index = json.loads((self.dir / "index.json").read_bytes())
        except FileNotFoundError:
            raise FlatcacheError(f"{self.dir} is not an OCI image layout (no index.json)") from None

    def _read(self, digest: str) -> bytes:
        _check_digest_syntax(digest)
        try:
            data = (self.dir / "blobs" / "sha256" / digest.split(":", 1)[1]).read_bytes()
        except FileNotFoundError:
            raise FlatcacheError(f"blob {digest} missing from {self.dir}") from None
        if sha256_digest(data) != digest:
            raise IntegrityError(f"digest mismatch for {digest} in {self.dir}")
        return data

    def _find(self, ref: ImageRef) -> dict:
        descs = self.index.get("manifests", [])
        names = {str(ref), ref.tag, f"{ref.name}:{ref.tag}"}
        for d in descs:
            if d.get("annotations", {}).get(REF_ANNOTATION) in names:
                return d
        if len(descs) == 1 and REF_ANNOTATION not in descs[0].get("annotations", {}):
            return descs[0]
        raise FlatcacheError(f"image {ref} not found in layout {self.dir}")

    def fetch_manifest(self, ref: ImageRef) -> Manifest:
        desc = self._find(ref)
        while desc.get("mediaType") in INDEX_TYPES:
            desc = _select_platform(json.loads(self._read(desc["digest"])), self.platform)
        raw = self._read(desc["digest"])
        self.dlcache.put_bytes(desc["digest"], raw)
        return Manifest.parse(raw, desc.get("mediaType"))

    def _blob_to_cache(self, digest: str) -> Path:
        src = self.dir / "blobs" / "sha256" / digest.split(":", 1)[1]
        if not src.exists():
            raise FlatcacheError(f"blob {digest} missing from {self.dir}")
        with open(src, "rb") as f:
            return self.dlcache.put_stream(digest, iter(lambda: f.read(1 << 20), b""))


class RegistrySource(ImageSource):
    """Anonymous OCI distribution registry (manifest and blob GETs only)."""

    ACCEPT = ", ".join(MANIFEST_TYPES + INDEX_TYPES)

    def __init__(self, base_url: str, dlcache: DownloadCache, platform: str = "linux/amd64",
                 session=None):
        super().__init__(dlcache, platform)
        import requests

        self.base_url = base_url.rstrip("/")
        self.session = session or requests.Session()
        self._name = None

    def _get(self, url: str, **kw):
        r = self.session.get(url, timeout=60, **kw)
        if r.status_code == 401:
            raise FlatcacheError(f"{url}: registry requires authentication, which is not "
                                 "supported; save the image as an OCI layout and pull "
                                 "with --from-layout")
        if r.status_code == 404:
            raise FlatcacheError(f"{url}: not found (HTTP 404)")
        if r.status_code != 200:
            raise FlatcacheError(f"{url}: HTTP {r.status_code}")
        return r

    def _manifest_bytes(self, name: str, reference: str) -> tuple[bytes, str]:
        r = self._get(f"{self.base_url}/v2/{name}/manifests/{reference}",
                      headers={"Accept": self.ACCEPT})
        media_type = r.headers.get("Content-Type", "").split(";")[0].strip()
        return r.content, media_type

    def fetch_manifest(self, ref: ImageRef) -> Manifest:
        raw, media_type = self._manifest_bytes(ref.name, ref.tag)
        if media_type in INDEX_TYPES or json.loads(raw).get("mediaType") in INDEX_TYPES:
            desc = _select_platform(json.loads(raw), self.platform)
            raw, media_type = self._manifest_bytes(ref.name, desc["digest"])
            if sha256_digest(raw) != desc["digest"]:
                raise IntegrityError(f"digest mismatch for manifest {desc['digest']}")
        self._name = ref.name
        self.dlcache.put_bytes(sha256_digest(raw), raw)
        return Manifest.parse(raw, media_type or None)

    def _blob_to_cache(self, digest: str) -> Path:
        r = self._get(f"{self.base_url}/v2/{self._name}/blobs/{digest}", stream=True)
        return self.dlcache.put_stream(digest, r.iter_content(1 << 20))


def load_local(layout_dir: Path, ref: ImageRef | str, dlcache: DownloadCache,
               platform: str = "linux/amd64") -> tuple[Manifest, list[LayerArchive]]:
    ref = ImageRef.parse(ref) if isinstance(ref, str) else ref
    src = LayoutSource(layout_dir, dlcache, platform)
    manifest = src.fetch_manifest(ref)
    src.blob(manifest.config_digest)
    return manifest, src.layers(manifest)


def fetch_remote(registry_url: str, name: str, ref: str, dlcache: DownloadCache,
                 platform: str = "linux/amd64") -> tuple[Manifest, list[LayerArchive]]:
    src = RegistrySource(registry_url, dlcache, platform)
    manifest = src.fetch_manifest(ImageRef(name=name, tag=ref))
    src.blob(manifest.config_digest)
    return manifest, src.layers(manifest)
