"""In-memory Merkle Patricia Trie with structural accounting.

Nodes are immutable and shared between snapshots: every mutation copies the
root-to-leaf path, so a new node object is exactly a node whose stored content
changed.  Digests are computed lazily by :meth:`Trie.commit`, which is where
the bottom-up re-hashing cost shows up.

Layers are counted from the root: the root node is layer 1, so the depth of a
leaf is the number of nodes on its path.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

from .keys import (
    Nibbles,
    StructuralError,
    check_indexing,
    common_prefix_length,
    keccak256,
)

__all__ = [
    "Branch",
    "DeleteReport",
    "Extension",
    "InsertReport",
    "KeyNotFound",
    "Leaf",
    "PathReport",
    "SimpleCodec",
    "Trie",
    "EMPTY_ROOT",
]


class KeyNotFound(KeyError):
    pass


class Leaf:
    __slots__ = ("remainder", "value", "_digest")
    kind = "leaf"

    def __init__(self, remainder: Nibbles, value: bytes):
        self.remainder = remainder
        self.value = value
        self._digest: Optional[bytes] = None

    def child_nodes(self):
        return ()

    def __repr__(self):
        return f"Leaf({''.join('%x' % n for n in self.remainder[:8])}..., {len(self.remainder)})"


class Extension:
    __slots__ = ("prefix", "child", "_digest")
    kind = "extension"

    def __init__(self, prefix: Nibbles, child: "Node"):
        if not prefix:
            raise StructuralError("extension prefix must not be empty")
        self.prefix = prefix
        self.child = child
        self._digest: Optional[bytes] = None

    def child_nodes(self):
        return (self.child,)

    def __repr__(self):
        return f"Extension({''.join('%x' % n for n in self.prefix)})"


class Branch:
    __slots__ = ("children", "_digest")
    kind = "branch"

    def __init__(self, children: tuple):
        self.children = children
        self._digest: Optional[bytes] = None

    def child_nodes(self):
        return tuple(c for c in self.children if c is not None)

    def occupied(self) -> int:
        return sum(c is not None for c in self.children)

    def __repr__(self):
        return "Branch(" + "".join("%x" % i for i, c in enumerate(self.children) if c is not None) + ")"


Node = Union[Leaf, Extension, Branch]
EMPTY_BRANCH = (None,) * 16


class SimpleCodec:
    """Length-prefixed node serialization: a kind tag followed by the fields.

    Child references are the children's digests.  Swap in another codec with
    the same ``encode``/``empty`` surface to change the commitment format.
    """

    empty = b""

    def encode(self, node: Node) -> bytes:
        if isinstance(node, Leaf):
            return (
                b"\x01"
                + bytes((len(node.remainder),))
                + bytes(node.remainder)
                + len(node.value).to_bytes(4, "big")
                + node.value
            )
        if isinstance(node, Extension):
            return b"\x02" + bytes((len(node.prefix),)) + bytes(node.prefix) + node.child._digest
        bitmap = 0
        parts = []
        for i, child in enumerate(node.children):
            if child is not None:
                bitmap |= 1 << i
                parts.append(child._digest)
        return b"\x03" + bitmap.to_bytes(2, "big") + b"".join(parts)


DEFAULT_CODEC = SimpleCodec()
EMPTY_ROOT = keccak256(DEFAULT_CODEC.empty)


@dataclass
class InsertReport:
    created: int = 0
    intermediates: int = 0
    split_kind: str = "none"  # none | leaf_split | extension_split
    depth_after: int = 0
    overwrite: bool = False


@dataclass
class DeleteReport:
    removed: int = 0
    collapsed: int = 0


@dataclass
class PathReport:
    visited: list = field(default_factory=list)
    offsets: list = field(default_factory=list)  # nibbles consumed before each visited node
    found: bool = False
    unique_part_len: int = 0
    full_len: int = 64

    @property
    def depth(self) -> int:
        return len(self.visited)

    @property
    def consumed(self) -> int:
        """Nibbles consumed by the non-leaf nodes on the path (m - n for a found leaf)."""
        return self.full_len - self.unique_part_len if self.found else 0


class _Delta:
    __slots__ = ("counts", "split_kind", "overwrite", "discarded")

    def __init__(self):
        self.counts = Counter()
        self.split_kind = "none"
        self.overwrite = False
        self.discarded = 0

    def add(self, kind: str, n: int = 1):
        self.counts[kind] += n

    def drop(self, kind: str, n: int = 1):
        self.counts[kind] -= n
        if kind != "leaf":
            self.discarded += n


class Trie:
    """A single MPT (State Trie or one Storage Trie).

    ``node_store`` maps digests to persisted nodes; :meth:`flush` moves
    committed, reachable nodes into it.  ``stats`` counts reachable nodes by
    kind and is kept in step with every mutation.
    """

    def __init__(self, codec: SimpleCodec = DEFAULT_CODEC):
        self.codec = codec
        self.root: Optional[Node] = None
        self.node_store: dict[bytes, Node] = {}
        self.stats: Counter = Counter(branch=0, extension=0, leaf=0)

    # -- queries ---------------------------------------------------------

    def __len__(self) -> int:
        return self.stats["leaf"]

    def __contains__(self, path) -> bool:
        return self.get(path)[0] is not None

    @property
    def node_count(self) -> int:
        return self.stats["branch"] + self.stats["extension"] + self.stats["leaf"]

    def get(self, path: Nibbles) -> tuple[Optional[bytes], PathReport]:
        check_indexing(path)
        report = PathReport()
        node = self.root
        pos = 0
        while node is not None:
            report.visited.append(node)
            report.offsets.append(pos)
            if isinstance(node, Leaf):
                if node.remainder == path[pos:]:
                    report.found = True
                    report.unique_part_len = len(node.remainder)
                    return node.value, report
                return None, report
            if isinstance(node, Extension):
                end = pos + len(node.prefix)
                if path[pos:end] != node.prefix:
                    return None, report
                node, pos = node.child, end
            else:
                node, pos = node.children[path[pos]], pos + 1
        return None, report

    def traverse_nodes(self, path: Nibbles) -> list:
        value, report = self.get(path)
        if value is None:
            raise KeyNotFound(path)
        return report.visited

    def depth_of(self, path: Nibbles) -> int:
        value, report = self.get(path)
        if value is None:
            raise KeyNotFound(path)
        return report.depth

    def path_report(self, path: Nibbles) -> PathReport:
        value, report = self.get(path)
        if value is None:
            raise KeyNotFound(path)
        return report

    def items(self) -> Iterator[tuple[Nibbles, bytes]]:
        stack = [(self.root, ())] if self.root is not None else []
        while stack:
            node, prefix = stack.pop()
            if isinstance(node, Leaf):
                yield prefix + node.remainder, node.value
            elif isinstance(node, Extension):
                stack.append((node.child, prefix + node.prefix))
            else:
                for i in range(15, -1, -1):
                    child = node.children[i]
                    if child is not None:
                        stack.append((child, prefix + (i,)))

    def walk(self) -> Iterator[tuple[Node, int, int]]:
        """Yield ``(node, offset, layer)`` for every reachable node."""
        stack = [(self.root, 0, 1)] if self.root is not None else []
        while stack:
            node, offset, layer = stack.pop()
            yield node, offset, layer
            if isinstance(node, Extension):
                stack.append((node.child, offset + len(node.prefix), layer + 1))
            elif isinstance(node, Branch):
                for child in node.children:
                    if child is not None:
                        stack.append((child, offset + 1, layer + 1))

    def count_nodes(self) -> Counter:
        """Brute-force reachable node count by kind."""
        counts = Counter(branch=0, extension=0, leaf=0)
        for node, _, _ in self.walk():
            counts[node.kind] += 1
        return counts

    def leaf_depths(self) -> dict[Nibbles, int]:
        out = {}
        stack = [(self.root, (), 1)] if self.root is not None else []
        while stack:
            node, prefix, layer = stack.pop()
            if isinstance(node, Leaf):
                out[prefix + node.remainder] = layer
            elif isinstance(node, Extension):
                stack.append((node.child, prefix + node.prefix, layer + 1))
            else:
                for i, child in enumerate(node.children):
                    if child is not None:
                        stack.append((child, prefix + (i,), layer + 1))
        return out

    # -- mutation --------------------------------------------------------

    def insert(self, path: Nibbles, value: bytes) -> InsertReport:
        check_indexing(path)
        if not value:
            raise StructuralError("value must be non-empty")
        existing, report = self.get(path)
        if existing == value:
            return InsertReport(depth_after=report.depth, overwrite=True)
        delta = _Delta()
        self.root = self._insert(self.root, path, 0, value, delta)
        self.stats.update(delta.counts)
        return InsertReport(
            created=sum(delta.counts.values()),
            intermediates=delta.counts["branch"] + delta.counts["extension"],
            split_kind=delta.split_kind,
            depth_after=self.depth_of(path),
            overwrite=delta.overwrite,
        )

    def _insert(self, node, path, pos, value, delta) -> Node:
        if node is None:
            delta.add("leaf")
            return Leaf(path[pos:], value)
        if isinstance(node, Leaf):
            rest = path[pos:]
            if node.remainder == rest:
                delta.overwrite = True
                return Leaf(rest, value)
            c = common_prefix_length(node.remainder, rest)
            children = list(EMPTY_BRANCH)
            children[node.remainder[c]] = Leaf(node.remainder[c + 1:], node.value)
            children[rest[c]] = Leaf(rest[c + 1:], value)
            delta.split_kind = "leaf_split"
            delta.add("leaf")
            delta.add("branch")
            branch = Branch(tuple(children))
            if c > 0:
                delta.add("extension")
                return Extension(rest[:c], branch)
            return branch
        if isinstance(node, Extension):
            prefix = node.prefix
            end = pos + len(prefix)
            c = common_prefix_length(prefix, path[pos:end])
            if c == len(prefix):
                return Extension(prefix, self._insert(node.child, path, end, value, delta))
            delta.split_kind = "extension_split"
            delta.drop("extension")
            children = list(EMPTY_BRANCH)
            tail = prefix[c + 1:]
            if tail:
                delta.add("extension")
                children[prefix[c]] = Extension(tail, node.child)
            else:
                children[prefix[c]] = node.child
            children[path[pos + c]] = Leaf(path[pos + c + 1:], value)
            delta.add("leaf")
            delta.add("branch")
            branch = Branch(tuple(children))
            if c > 0:
                delta.add("extension")
                return Extension(prefix[:c], branch)
            return branch
        nib = path[pos]
        children = list(node.children)
        children[nib] = self._insert(children[nib], path, pos + 1, value, delta)
        return Branch(tuple(children))

    def delete(self, path: Nibbles) -> DeleteReport:
        check_indexing(path)
        delta = _Delta()
        self.root = self._delete(self.root, path, 0, delta)
        self.stats.update(delta.counts)
        return DeleteReport(removed=-sum(delta.counts.values()), collapsed=delta.discarded)

    def _delete(self, node, path, pos, delta) -> Optional[Node]:
        if node is None:
            raise KeyNotFound(path)
        if isinstance(node, Leaf):
            if node.remainder != path[pos:]:
                raise KeyNotFound(path)
            delta.drop("leaf")
            return None
        if isinstance(node, Extension):
            end = pos + len(node.prefix)
            if path[pos:end] != node.prefix:
                raise KeyNotFound(path)
            child = self._delete(node.child, path, end, delta)
            return self._prepend(node.prefix, child, delta, discard="extension")
        nib = path[pos]
        children = list(node.children)
        children[nib] = self._delete(children[nib], path, pos + 1, delta)
        remaining = [i for i, c in enumerate(children) if c is not None]
        if len(remaining) >= 2:
            return Branch(tuple(children))
        # a branch left with one child collapses into it
        delta.drop("branch")
        only = remaining[0]
        return self._prepend((only,), children[only], delta, discard=None)

    @staticmethod
    def _prepend(prefix, child, delta, discard) -> Node:
        """Hang ``child`` below ``prefix``, merging with a leaf/extension child.

        ``discard`` names the kind of node that owned ``prefix`` before (an
        extension being replaced), or None when the prefix is new.
        """
        if isinstance(child, Branch):
            if discard is None:
                delta.add("extension")
            return Extension(prefix, child)
        if discard is not None:
            delta.drop(discard)
        if isinstance(child, Leaf):
            return Leaf(prefix + child.remainder, child.value)
        return Extension(prefix + child.prefix, child.child)

    # -- commitments -------------------------------------------------------

    def _hash(self, node) -> int:
        if node._digest is not None:
            return 0
        n = 0
        for child in node.child_nodes():
            n += self._hash(child)
        node._digest = keccak256(self.codec.encode(node))
        return n + 1

    def commit(self) -> int:
        """Hash every dirty node bottom-up; returns the number of hashes computed."""
        if self.root is None:
            return 0
        return self._hash(self.root)

    def root_commitment(self) -> bytes:
        if self.root is None:
            return keccak256(self.codec.empty)
        self.commit()
        return self.root._digest

    def dirty_nodes(self) -> list:
        """Nodes created since the last commit, i.e. nodes whose content changed."""
        out = []
        stack = [self.root] if self.root is not None and self.root._digest is None else []
        while stack:
            node = stack.pop()
            out.append(node)
            for child in node.child_nodes():
                if child._digest is None:
                    stack.append(child)
        return out

    def flush(self) -> int:
        """Persist reachable nodes missing from ``node_store``; returns how many."""
        self.commit()
        count = 0
        stack = [self.root] if self.root is not None else []
        while stack:
            node = stack.pop()
            if node._digest in self.node_store:
                continue
            self.node_store[node._digest] = node
            count += 1
            stack.extend(node.child_nodes())
        return count

    def store_bytes(self) -> int:
        """Size metric for the persisted store: sum of encoded node lengths."""
        return sum(len(self.codec.encode(n)) for n in self.node_store.values())

    def copy(self) -> "Trie":
        """Snapshot sharing all nodes; the store keeps only reachable persisted nodes."""
        other = Trie(self.codec)
        other.root = self.root
        other.stats = Counter(self.stats)
        for node, _, _ in self.walk():
            d = node._digest
            if d is not None and d in self.node_store:
                other.node_store[d] = node
        return other

    def snapshot(self) -> "Trie":
        """O(1) structural copy with an empty node store, for simulations."""
        other = Trie(self.codec)
        other.root = self.root
        other.stats = Counter(self.stats)
        return other

    @classmethod
    def from_items(cls, items, codec: SimpleCodec = DEFAULT_CODEC) -> "Trie":
        trie = cls(codec)
        for path, value in items:
            trie.insert(path, value)
        trie.flush()
        return trie
