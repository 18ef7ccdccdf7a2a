"""The state tree: cache nodes, branch labels and cache-hit search."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from flatcache.digest import StateID, root_id
from flatcache.errors import CorruptionError, UsageError

INDEX_HEADER = "# flatcache tree v1"
LABEL_REF_PREFIX = "refs/heads/"
NODE_REF_PREFIX = "refs/nodes/"
ROOT_LABEL = "root"


@dataclass(eq=False)
class CacheNode:
    state_id: StateID
    parent: "CacheNode | None"
    instruction_text: str
    commit_ref: str
    seq: int
    children: list["CacheNode"] = field(default_factory=list, repr=False)

    def path(self) -> list["CacheNode"]:
        """Nodes from the root down to this one."""
        out = []
        node = self
        while node is not None:
            out.append(node)
            node = node.parent
        return out[::-1]

    def __repr__(self):
        return f"<CacheNode {self.seq} {self.state_id.abbrev} {self.instruction_text!r}>"


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(text: str) -> str:
    out = []
    it = iter(text)
    for c in it:
        if c == "\\":
            c = {"t": "\t", "n": "\n", "\\": "\\"}[next(it)]
        out.append(c)
    return "".join(out)


class CacheTree:
    """In-memory tree persisted to a tab-separated index file.

    With a ``git`` handle, every node also gets a ref under ``refs/nodes/``
    (keeping its commit alive) and every label mirrors to a branch ref.
    """

    def __init__(self, index_path: Path | None = None, git=None):
        self.index_path = Path(index_path) if index_path else None
        self.git = git
        self.nodes: dict[int, CacheNode] = {}
        self.labels: dict[str, CacheNode] = {}
        self._by_id: dict[StateID, list[CacheNode]] = {}
        self.next_seq = 0

    # persistence

    @classmethod
    def create(cls, root_commit: str, index_path: Path | None = None, git=None) -> "CacheTree":
        tree = cls(index_path, git)
        tree._insert(CacheNode(root_id(), None, "ROOT", root_commit, 0))
        tree.next_seq = 1
        tree._persist_node(tree.root)
        tree.save()
        return tree

    @classmethod
    def load(cls, index_path: Path, git=None) -> "CacheTree":
        tree = cls(index_path, git)
        try:
            lines = Path(index_path).read_text("utf-8").splitlines()
        except FileNotFoundError:
            raise CorruptionError(f"tree index missing: {index_path}") from None
        if not lines or lines[0] != INDEX_HEADER:
            raise CorruptionError(f"bad tree index header in {index_path}")
        try:
            for line in lines[1:]:
                kind, *rest = line.split("\t")
                if kind == "N":
                    seq, sid, parent, commit, text = rest
                    parent_node = None if parent == "-" else tree.nodes[int(parent)]
                    tree._insert(CacheNode(StateID.from_hex(sid), parent_node,
                                           _unescape(text), commit, int(seq)))
                elif kind == "L":
                    name, seq = rest
                    tree.labels[name] = tree.nodes[int(seq)]
                elif kind == "S":
                    tree.next_seq = int(rest[0])
                else:
                    raise ValueError(kind)
        except (KeyError, ValueError) as e:
            raise CorruptionError(f"malformed tree index {index_path}: {e}") from None
        roots = [n for n in tree.nodes.values() if n.parent is None]
        if len(roots) != 1 or roots[0].state_id != root_id():
            raise CorruptionError("tree index must contain exactly one root node")
        tree.next_seq = max(tree.next_seq, max(tree.nodes) + 1)
        return tree

    def save(self):
        if self.index_path is None:
            return
        lines = [INDEX_HEADER]
        for seq in sorted(self.nodes):
            n = self.nodes[seq]
            parent = "-" if n.parent is None else str(n.parent.seq)
            lines.append("\t".join(["N", str(seq), n.state_id.hex, parent, n.commit_ref,
                                    _escape(n.instruction_text)]))
        for name in sorted(self.labels):
            lines.append(f"L\t{name}\t{self.labels[name].seq}")
        lines.append(f"S\t{self.next_seq}")
        tmp = self.index_path.with_name(self.index_path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.index_path)

    def _persist_node(self, node: CacheNode):
        if self.git is not None:
            self.git.update_ref(f"{NODE_REF_PREFIX}{node.seq}", node.commit_ref)

    def _insert(self, node: CacheNode):
        self.nodes[node.seq] = node
        if node.parent is not None:
            node.parent.children.append(node)
        self._by_id.setdefault(node.state_id, []).append(node)

    # queries

    @property
    def root(self) -> CacheNode:
        return self.nodes[min(self.nodes)]

    def __len__(self):
        return len(self.nodes)

    def labels_of(self, node: CacheNode) -> list[str]:
        return sorted(name for name, n in self.labels.items() if n is node)

    def branch(self, name: str) -> list[CacheNode]:
        node = self.labels.get(name)
        return node.path() if node is not None else []

    def find_hit(self, state_id: StateID, image: str | None = None,
                 rebuild: bool = False) -> CacheNode | None:
        """Pick the cached node to reuse for ``state_id``, or None on a miss.

        Rebuild mode misses unconditionally.  Otherwise a match on the
        branch currently labeled ``image`` wins (deepest first), then the
        most recently created match anywhere.  Searching only the image's
        own branch was rejected because it misses states built under other
        names; a pure global-recency search lets activity on one image
        change the hits of another.
        """
        if rebuild:
            return None
        matches = self._by_id.get(state_id)
        if not matches:
            return None
        if image is not None:
            for node in reversed(self.branch(image)):
                if node.state_id == state_id:
                    return node
        return max(matches, key=lambda n: n.seq)

    def reachable(self, labels: Iterable[str] | None = None) -> set[CacheNode]:
        names = self.labels if labels is None else labels
        out = {self.root}
        for name in names:
            if name in self.labels:
                out.update(self.labels[name].path())
        return out

    # mutation

    def add_node(self, parent: CacheNode, state_id: StateID, instruction_text: str,
                 commit_ref: str, rebuild: bool = False) -> CacheNode:
        if self.nodes.get(parent.seq) is not parent:
            raise UsageError(f"parent {parent!r} is not in this tree")
        if not rebuild and any(c.state_id == state_id for c in parent.children):
            raise UsageError(f"{parent!r} already has a child {state_id.abbrev}; "
                             "that is a cache hit")
        node = CacheNode(state_id, parent, instruction_text, commit_ref, self.next_seq)
        self.next_seq += 1
        self._insert(node)
        self._persist_node(node)
        self.save()
        return node

    def move_label(self, name: str, node: CacheNode):
        if self.nodes.get(node.seq) is not node:
            raise UsageError(f"{node!r} is not in this tree")
        if self.labels.get(name) is node:
            return
        self.labels[name] = node
        if self.git is not None:
            self.git.update_ref(f"{LABEL_REF_PREFIX}{name}", node.commit_ref)
        self.save()

    def delete_label(self, name: str) -> bool:
        if name not in self.labels:
            return False
        del self.labels[name]
        self.save()
        if self.git is not None:
            self.git.update_refs([f"delete {LABEL_REF_PREFIX}{name}"])
        return True

    def remove_nodes(self, doomed: set[CacheNode]):
        """Drop nodes (with their refs).  The index is rewritten before any
        ref goes away, so an interruption leaves a consistent index."""
        doomed = {n for n in doomed if n is not self.root}
        if not doomed:
            return
        for n in doomed:
            if any(c not in doomed for c in n.children):
                raise UsageError(f"{n!r} still has surviving children")
            if n in self.labels.values():
                raise UsageError(f"{n!r} is still labeled")
        for n in doomed:
            del self.nodes[n.seq]
            self._by_id[n.state_id].remove(n)
            if not self._by_id[n.state_id]:
                del self._by_id[n.state_id]
            if n.parent is not None and n.parent not in doomed:
                n.parent.children.remove(n)
        self.save()
        if self.git is not None:
            self.git.update_refs([f"delete {NODE_REF_PREFIX}{n.seq}" for n in doomed])

    # rendering

    def _display_labels(self, node: CacheNode) -> list[str]:
        names = self.labels_of(node)
        # The root is shown as image "root" only while nothing else is cached.
        if node is self.root and not node.children:
            names = [ROOT_LABEL] + names
        return names

    def render(self) -> str:
        lines = []

        def visit(node, depth):
            pad = "  " * depth
            labels = self._display_labels(node)
            suffix = f" [{', '.join(labels)}]" if labels else ""
            lines.append(f"{pad}{node.state_id.abbrev}")
            lines.append(f"{pad}{node.instruction_text}{suffix}")
            for child in sorted(node.children, key=lambda c: c.seq):
                visit(child, depth + 1)

        visit(self.root, 0)
        return "\n".join(lines) + "\n"

    def render_dot(self) -> str:
        def quote(s):
            return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'

        lines = ["digraph cache {",
                 "  node [shape=box, style=filled, fillcolor=white];"]
        ordered = sorted(self.nodes.values(), key=lambda n: n.seq)
        for n in ordered:
            text = f"{n.state_id.abbrev}\\n" + n.instruction_text.replace("\\", "\\\\") \
                .replace('"', '\\"')
            lines.append(f'  n{n.seq} [label="{text}"];')
        for n in ordered:
            if n.parent is not None:
                lines.append(f"  n{n.parent.seq} -> n{n.seq};")
        for n in ordered:
            for name in self._display_labels(n):
                lid = quote(f"label:{name}")
                lines.append(f"  {lid} [label={quote(name)}, fillcolor=gray];")
                lines.append(f"  {lid} -> n{n.seq} [arrowhead=none, style=dashed];")
        lines.append("}")
        return "\n".join(lines) + "\n"
