"""On-image control files: the Git metadata manifest and container metadata.

Both live under ``/ch`` inside the image so they travel with every commit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from flatcache.errors import CorruptionError

CONTROL_DIR = "ch"
MANIFEST_PATH = "ch/git-meta"
METADATA_PATH = "ch/metadata.json"
CONTROL_FILES = frozenset([MANIFEST_PATH, METADATA_PATH])

MANIFEST_MAGIC = "flatcache-git-meta"
MANIFEST_VERSION = 1


@dataclass
class FileRecord:
    path: str
    ftype: str  # regular, directory, symlink, fifo
    mode: int
    mtime: int


@dataclass
class MetadataManifest:
    """File metadata Git cannot hold, recorded at commit and replayed at checkout.

    Serialized as one header line followed by one JSON object per line.
    Paths are image-root-relative and name the image's view (before the
    ``.git`` → ``.weirdal_`` rename), except ``renames[].stored``.
    """

    version: int = MANIFEST_VERSION
    files: list[FileRecord] = field(default_factory=list)
    hardlink_groups: list[tuple[str, list[str]]] = field(default_factory=list)
    empty_dirs: list[str] = field(default_factory=list)
    fifos: list[str] = field(default_factory=list)
    renames: list[tuple[str, str]] = field(default_factory=list)  # (stored, original)
    large_files: list[tuple[str, str]] = field(default_factory=list)  # (path, key)

    def dumps(self) -> bytes:
        lines = [f"{MANIFEST_MAGIC} {self.version}"]
        for f in self.files:
            lines.append(json.dumps({"t": "file", "path": f.path, "ftype": f.ftype,
                                     "mode": f.mode, "mtime": f.mtime}))
        for canonical, members in self.hardlink_groups:
            lines.append(json.dumps({"t": "hardlink", "canonical": canonical,
                                     "members": members}))
        for p in self.empty_dirs:
            lines.append(json.dumps({"t": "emptydir", "path": p}))
        for p in self.fifos:
            lines.append(json.dumps({"t": "fifo", "path": p}))
        for stored, original in self.renames:
            lines.append(json.dumps({"t": "rename", "stored": stored, "original": original}))
        for p, key in self.large_files:
            lines.append(json.dumps({"t": "large", "path": p, "key": key}))
        return ("\n".join(lines) + "\n").encode("ascii")

    @classmethod
    def loads(cls, data: bytes) -> "MetadataManifest":
        lines = data.decode("ascii").splitlines()
        if not lines:
            raise CorruptionError("empty metadata manifest")
        magic, _, version = lines[0].partition(" ")
        if magic != MANIFEST_MAGIC:
            raise CorruptionError("not a metadata manifest")
        if version != str(MANIFEST_VERSION):
            raise CorruptionError(f"unknown metadata manifest version {version}")
        m = cls()
        for line in lines[1:]:
            rec = json.loads(line)
            t = rec.pop("t")
            if t == "file":
                m.files.append(FileRecord(**rec))
            elif t == "hardlink":
                m.hardlink_groups.append((rec["canonical"], rec["members"]))
            elif t == "emptydir":
                m.empty_dirs.append(rec["path"])
            elif t == "fifo":
                m.fifos.append(rec["path"])
            elif t == "rename":
                m.renames.append((rec["stored"], rec["original"]))
            elif t == "large":
                m.large_files.append((rec["path"], rec["key"]))
            else:
                raise CorruptionError(f"unknown manifest record type {t!r}")
        return m


@dataclass
class ImageMetadata:
    """Container metadata carried by an image state.

    ``arg_values`` are build-scoped and never written to the image.
    """

    environment: dict[str, str] = field(default_factory=dict)
    workdir: str = "/"
    arg_values: dict[str, str] = field(default_factory=dict)

    def dumps(self) -> bytes:
        doc = {"environment": self.environment, "workdir": self.workdir}
        return (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode()

    @classmethod
    def loads(cls, data: bytes) -> "ImageMetadata":
        doc = json.loads(data)
        return cls(environment=dict(doc.get("environment", {})),
                   workdir=doc.get("workdir", "/"))

    def build_environment(self) -> dict[str, str]:
        env = dict(self.arg_values)
        env.update(self.environment)
        return env

    def copy(self) -> "ImageMetadata":
        return ImageMetadata(**{k: (dict(v) if isinstance(v, dict) else v)
                                for k, v in asdict(self).items()})
