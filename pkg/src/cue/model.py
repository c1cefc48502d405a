"""Pure two-layer union filesystem model.

The merged view every container sees is lower (the shared base tree,
owned by the administrator) with upper (the user's private delta) stacked
on top: upper entries win, whiteouts hide lower entries, opaque upper
directories stop merging with their lower counterpart entirely.

Everything here is a value transformation: operations take a LayerStack
and return new trees without touching the host filesystem, so the
runtime's semantics can be exercised and property-tested without any
privilege.  Resolution is dynamic (nothing is cached), so an updated
lower tree is visible to the next lookup by construction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Mapping, Optional, Union

from .errors import (
    AbsentParent,
    AbsentPath,
    DirectoryNotEmpty,
    HiddenPath,
    IsADirectory,
    MalformedPath,
    NotADirectory,
)

__all__ = [
    "RegularFile",
    "Symlink",
    "Whiteout",
    "Directory",
    "Node",
    "LayerTree",
    "LayerStack",
    "Origin",
    "ResolutionKind",
    "Resolution",
    "JournalOp",
    "JournalEntry",
    "JournalState",
    "MergeJournal",
    "split_path",
    "join_path",
    "normalize",
    "content_checksum",
    "empty_tree",
    "resolve",
    "write_file",
    "remove",
    "list_dir",
    "flatten",
    "stage_merge",
    "apply_journal",
    "merge_down",
]


# ---------------------------------------------------------------------------
# paths

def split_path(path: str) -> tuple[str, ...]:
    """Split a normalized absolute path into components.

    Normalized means: starts with "/", no ".", "..", or empty components,
    no trailing slash except the root itself, no NUL or newline bytes.
    Raises MalformedPath otherwise.
    """
    if not isinstance(path, str) or not path.startswith("/"):
        raise MalformedPath(repr(path))
    if path == "/":
        return ()
    if path.endswith("/"):
        raise MalformedPath(path)
    parts = path[1:].split("/")
    for part in parts:
        if part in ("", ".", "..") or "\0" in part or "\n" in part:
            raise MalformedPath(path)
    return tuple(parts)


def join_path(parts) -> str:
    return "/" + "/".join(parts)


def normalize(path: str) -> str:
    """Best-effort normalization of user input ("//a/./b/" -> "/a/b").

    ".." is rejected rather than collapsed: with symlinks in the stack a
    lexical collapse would lie about the target.
    """
    if not isinstance(path, str) or not path.startswith("/"):
        raise MalformedPath(repr(path))
    kept = []
    for part in path.split("/"):
        if part in ("", "."):
            continue
        if part == ".." or "\0" in part or "\n" in part:
            raise MalformedPath(path)
        kept.append(part)
    return join_path(kept)


def is_strict_prefix(prefix: str, path: str) -> bool:
    """Component-wise strict prefix test on normalized paths."""
    a, b = split_path(prefix), split_path(path)
    return len(a) < len(b) and b[: len(a)] == a


# ---------------------------------------------------------------------------
# nodes and trees

@dataclass(frozen=True)
class RegularFile:
    content: bytes = b""


@dataclass(frozen=True)
class Symlink:
    # Targets are kept verbatim and never re-resolved across layers.
    target: str


@dataclass(frozen=True)
class Whiteout:
    """Upper-layer marker hiding the same-path lower entry."""


@dataclass(frozen=True)
class Directory:
    children: Mapping[str, "Node"] = field(default_factory=dict)
    opaque: bool = False


Node = Union[RegularFile, Symlink, Whiteout, Directory]


def empty_tree() -> "LayerTree":
    return LayerTree(root=Directory(children={}))


@dataclass(frozen=True)
class LayerTree:
    """A tree of nodes addressed by normalized absolute paths."""

    root: Directory = field(default_factory=lambda: Directory(children={}))

    def get(self, path: str) -> Optional[Node]:
        """Node at path, or None when absent (or an ancestor is not a dir)."""
        node: Optional[Node] = self.root
        for name in split_path(path):
            if not isinstance(node, Directory):
                return None
            node = node.children.get(name)
        return node

    def contains(self, path: str) -> bool:
        return self.get(path) is not None

    def set(self, path: str, node: Node) -> "LayerTree":
        """New tree with node at path; every ancestor must be a Directory."""
        parts = split_path(path)
        if not parts:
            raise IsADirectory("cannot replace the root directory")

        def rebuild(d: Directory, depth: int) -> Directory:
            name = parts[depth]
            children = dict(d.children)
            if depth == len(parts) - 1:
                children[name] = node
            else:
                child = d.children.get(name)
                if not isinstance(child, Directory):
                    raise NotADirectory(join_path(parts[: depth + 1]))
                children[name] = rebuild(child, depth + 1)
            return Directory(children=children, opaque=d.opaque)

        return LayerTree(root=rebuild(self.root, 0))

    def delete(self, path: str) -> "LayerTree":
        """New tree without the node (and subtree) at path."""
        parts = split_path(path)
        if not parts:
            raise IsADirectory("cannot delete the root directory")
        if self.get(path) is None:
            raise AbsentPath(path)

        def rebuild(d: Directory, depth: int) -> Directory:
            name = parts[depth]
            children = dict(d.children)
            if depth == len(parts) - 1:
                del children[name]
            else:
                children[name] = rebuild(children[name], depth + 1)  # type: ignore[arg-type]
            return Directory(children=children, opaque=d.opaque)

        return LayerTree(root=rebuild(self.root, 0))

    def walk(self) -> Iterator[tuple[str, Node]]:
        """Preorder (path, node) pairs, children in byte-sorted name order."""

        def rec(prefix: tuple[str, ...], node: Node) -> Iterator[tuple[str, Node]]:
            yield join_path(prefix), node
            if isinstance(node, Directory):
                for name in sorted(node.children, key=lambda s: s.encode("utf-8")):
                    yield from rec(prefix + (name,), node.children[name])

        return rec((), self.root)

    def node_count(self) -> int:
        return sum(1 for _ in self.walk())


def _check_plain(tree: LayerTree) -> None:
    for path, node in tree.walk():
        if isinstance(node, Whiteout):
            raise ValueError(f"lower layer must not contain whiteouts: {path}")
        if isinstance(node, Directory) and node.opaque:
            raise ValueError(f"lower layer must not contain opaque markers: {path}")


@dataclass(frozen=True)
class LayerStack:
    """Exactly two layers: the shared base and one user's delta."""

    lower: LayerTree
    upper: LayerTree

    def __post_init__(self) -> None:
        _check_plain(self.lower)


# ---------------------------------------------------------------------------
# resolution

class Origin(Enum):
    UPPER = "upper"
    LOWER = "lower"


class ResolutionKind(Enum):
    FOUND_UPPER = "FoundUpper"
    FOUND_LOWER = "FoundLower"
    HIDDEN = "Hidden"
    ABSENT = "Absent"


@dataclass(frozen=True)
class Resolution:
    outcome: ResolutionKind
    node: Optional[Node] = None

    @property
    def found(self) -> bool:
        return self.outcome in (ResolutionKind.FOUND_UPPER, ResolutionKind.FOUND_LOWER)


# why the lower subtree stopped being merged along an ancestor chain
_CUT_WHITEOUT = "whiteout"
_CUT_OPAQUE = "opaque"
_CUT_SHADOW = "shadow"


def _descend_upper(stack: LayerStack, parts: tuple[str, ...]):
    """Walk the upper tree along parts.

    Returns (upper node at the full path or None, first cause that cut the
    lower layer's visibility at a strict ancestor, or None).
    """
    node: Optional[Node] = stack.upper.root
    cut: Optional[str] = None
    for name in parts:
        nxt: Optional[Node] = None
        if isinstance(node, Directory):
            if node.opaque and cut is None:
                cut = _CUT_OPAQUE
            nxt = node.children.get(name)
        elif isinstance(node, Whiteout):
            if cut is None:
                cut = _CUT_WHITEOUT
        elif node is not None:  # file or symlink shadowing the subtree
            if cut is None:
                cut = _CUT_SHADOW
        node = nxt
    return node, cut


def resolve(stack: LayerStack, path: str) -> Resolution:
    """Resolve path in the merged view; the customized (upper) version wins."""
    parts = split_path(path)
    if not parts:
        return Resolution(ResolutionKind.FOUND_UPPER, stack.upper.root)
    upper_node, cut = _descend_upper(stack, parts)
    lower_node = stack.lower.get(path)

    if upper_node is not None and not isinstance(upper_node, Whiteout):
        return Resolution(ResolutionKind.FOUND_UPPER, upper_node)
    if isinstance(upper_node, Whiteout):
        if lower_node is not None:
            return Resolution(ResolutionKind.HIDDEN)
        return Resolution(ResolutionKind.ABSENT)
    if lower_node is None:
        return Resolution(ResolutionKind.ABSENT)
    if cut is None:
        return Resolution(ResolutionKind.FOUND_LOWER, lower_node)
    if cut in (_CUT_WHITEOUT, _CUT_OPAQUE):
        return Resolution(ResolutionKind.HIDDEN)
    return Resolution(ResolutionKind.ABSENT)


def list_dir(stack: LayerStack, path: str) -> list[tuple[str, Origin]]:
    """Merged directory listing, byte-sorted by name.

    Upper entries shadow same-name lower entries; whiteout children are
    omitted; an opaque upper directory drops lower entries entirely.
    """
    parts = split_path(path)
    if parts:
        upper_node, cut = _descend_upper(stack, parts)
    else:
        upper_node, cut = stack.upper.root, None
    lower_node = stack.lower.get(path)

    upper_dir: Optional[Directory] = None
    if isinstance(upper_node, Whiteout):
        if lower_node is not None:
            raise HiddenPath(path)
        raise AbsentPath(path)
    if upper_node is not None:
        if not isinstance(upper_node, Directory):
            raise NotADirectory(path)
        upper_dir = upper_node
    else:
        if lower_node is None:
            raise AbsentPath(path)
        if cut in (_CUT_WHITEOUT, _CUT_OPAQUE):
            raise HiddenPath(path)
        if cut is not None:
            raise AbsentPath(path)
        if not isinstance(lower_node, Directory):
            raise NotADirectory(path)

    lower_merged = (
        cut is None
        and isinstance(lower_node, Directory)
        and (upper_dir is None or not upper_dir.opaque)
    )
    names: dict[str, Origin] = {}
    if lower_merged:
        for name in lower_node.children:  # type: ignore[union-attr]
            names[name] = Origin.LOWER
    if upper_dir is not None:
        for name, child in upper_dir.children.items():
            if isinstance(child, Whiteout):
                names.pop(name, None)
            else:
                names[name] = Origin.UPPER
    return [(n, names[n]) for n in sorted(names, key=lambda s: s.encode("utf-8"))]


# ---------------------------------------------------------------------------
# mutation (copy-up and whiteout land in upper; lower is never touched)

def _require_dir_ancestors(stack: LayerStack, parts: tuple[str, ...]) -> None:
    for i in range(len(parts) - 1):
        prefix = join_path(parts[: i + 1])
        res = resolve(stack, prefix)
        if res.outcome in (ResolutionKind.HIDDEN, ResolutionKind.ABSENT):
            raise AbsentParent(prefix)
        if not isinstance(res.node, Directory):
            raise NotADirectory(prefix)


def _copy_up_dirs(upper: LayerTree, parts: tuple[str, ...]) -> LayerTree:
    # Shallow copy-up: ancestor directories only, never their siblings.
    for i in range(len(parts) - 1):
        prefix = join_path(parts[: i + 1])
        if upper.get(prefix) is None:
            upper = upper.set(prefix, Directory(children={}))
    return upper


def write_file(stack: LayerStack, path: str, content: bytes) -> LayerStack:
    """Place a regular file at path in the upper layer.

    Whatever previously occupied the path in the merged view (file,
    symlink, whiteout, or a directory subtree) is shadowed or replaced;
    the lower layer is byte-identical afterwards.
    """
    if not isinstance(content, (bytes, bytearray)):
        raise TypeError("file content must be bytes")
    parts = split_path(path)
    if not parts:
        raise IsADirectory("cannot write a file over the root directory")
    _require_dir_ancestors(stack, parts)
    upper = _copy_up_dirs(stack.upper, parts)
    upper = upper.set(path, RegularFile(bytes(content)))
    return LayerStack(lower=stack.lower, upper=upper)


def remove(stack: LayerStack, path: str, recursive: bool = False) -> LayerStack:
    """Remove path from the merged view.

    A lower-layer occurrence is hidden with a whiteout; an upper-only node
    is deleted outright. Removing a directory that lists children requires
    recursive=True.
    """
    parts = split_path(path)
    if not parts:
        raise IsADirectory("cannot remove the root directory")
    res = resolve(stack, path)
    if not res.found:
        raise AbsentPath(path)
    if isinstance(res.node, Directory):
        if list_dir(stack, path) and not recursive:
            raise DirectoryNotEmpty(path)
    upper = stack.upper
    if upper.get(path) is not None:
        upper = upper.delete(path)
    if stack.lower.contains(path):
        upper = _copy_up_dirs(upper, parts)
        upper = upper.set(path, Whiteout())
    return LayerStack(lower=stack.lower, upper=upper)


# ---------------------------------------------------------------------------
# flatten

def flatten(stack: LayerStack) -> LayerTree:
    """Collapse the stack into a single plain tree (no markers).

    Resolving any path against {lower: flatten(stack), upper: empty}
    matches resolving it against the stack, modulo the origin tag.
    """

    def merge(upper: Optional[Node], lower: Optional[Node]) -> Optional[Node]:
        if upper is None:
            return lower
        if isinstance(upper, Whiteout):
            return None
        if isinstance(upper, Directory):
            lower_dir = lower if isinstance(lower, Directory) and not upper.opaque else None
            children: dict[str, Node] = {}
            if lower_dir is not None:
                for name, child in lower_dir.children.items():
                    if name not in upper.children:
                        children[name] = child
            for name, child in upper.children.items():
                merged = merge(
                    child,
                    lower_dir.children.get(name) if lower_dir is not None else None,
                )
                if merged is not None:
                    children[name] = merged
            return Directory(children=children, opaque=False)
        return upper

    root = merge(stack.upper.root, stack.lower.root)
    assert isinstance(root, Directory)
    return LayerTree(root=root)


# ---------------------------------------------------------------------------
# merge-down (the transactional base update, staged as a journal)

def content_checksum(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


class JournalOp(Enum):
    COPY_TO_LOWER = "CopyToLower"
    DELETE_FROM_LOWER = "DeleteFromLower"
    MARK_OPAQUE_APPLIED = "MarkOpaqueApplied"


class JournalState(Enum):
    STAGED = "Staged"
    COMMITTED = "Committed"
    ABORTED = "Aborted"


@dataclass(frozen=True)
class JournalEntry:
    op: JournalOp
    path: str
    checksum: Optional[str] = None  # sha256 hex of the payload, files/symlinks only

    def to_line(self) -> str:
        return f"{self.op.value} {self.path} {self.checksum or '-'}"

    @classmethod
    def from_line(cls, line: str) -> "JournalEntry":
        head, checksum = line.rsplit(" ", 1)
        kind, path = head.split(" ", 1)
        return cls(
            op=JournalOp(kind),
            path=path,
            checksum=None if checksum == "-" else checksum,
        )


@dataclass(frozen=True)
class MergeJournal:
    entries: tuple[JournalEntry, ...]
    state: JournalState


def _payload(node: Node) -> Optional[bytes]:
    if isinstance(node, RegularFile):
        return node.content
    if isinstance(node, Symlink):
        return node.target.encode("utf-8")
    return None


def stage_merge(stack: LayerStack) -> tuple[JournalEntry, ...]:
    """Compute the ordered journal that applies upper into lower.

    Replaying the entries over the lower tree yields flatten(stack);
    the walk is deterministic (preorder, byte-sorted names).
    """
    entries: list[JournalEntry] = []

    def sorted_names(d: Directory):
        return sorted(d.children, key=lambda s: s.encode("utf-8"))

    def visit(parts: tuple[str, ...], upper: Node, lower: Optional[Node]) -> None:
        path = join_path(parts)
        if isinstance(upper, Whiteout):
            if lower is not None:
                entries.append(JournalEntry(JournalOp.DELETE_FROM_LOWER, path))
            return
        if isinstance(upper, (RegularFile, Symlink)):
            if isinstance(lower, Directory):
                entries.append(JournalEntry(JournalOp.DELETE_FROM_LOWER, path))
            payload = _payload(upper)
            assert payload is not None
            entries.append(
                JournalEntry(JournalOp.COPY_TO_LOWER, path, content_checksum(payload))
            )
            return
        # directory
        lower_dir = lower if isinstance(lower, Directory) else None
        if upper.opaque:
            entries.append(JournalEntry(JournalOp.MARK_OPAQUE_APPLIED, path))
            if lower_dir is not None:
                for name in sorted_names(lower_dir):
                    entries.append(
                        JournalEntry(JournalOp.DELETE_FROM_LOWER, join_path(parts + (name,)))
                    )
            elif lower is not None:
                entries.append(JournalEntry(JournalOp.DELETE_FROM_LOWER, path))
                entries.append(JournalEntry(JournalOp.COPY_TO_LOWER, path))
            else:
                entries.append(JournalEntry(JournalOp.COPY_TO_LOWER, path))
            for name in sorted_names(upper):
                visit(parts + (name,), upper.children[name], None)
            return
        if lower_dir is None:
            if lower is not None:
                entries.append(JournalEntry(JournalOp.DELETE_FROM_LOWER, path))
            if parts:
                entries.append(JournalEntry(JournalOp.COPY_TO_LOWER, path))
        for name in sorted_names(upper):
            visit(
                parts + (name,),
                upper.children[name],
                lower_dir.children.get(name) if lower_dir is not None else None,
            )

    visit((), stack.upper.root, stack.lower.root)
    return tuple(entries)


def apply_journal(
    lower: LayerTree,
    entries: tuple[JournalEntry, ...],
    payloads: Mapping[str, Node],
) -> LayerTree:
    """Replay journal entries onto a lower tree (value-level).

    payloads maps each CopyToLower path to its source node; checksums are
    verified so a torn payload cannot be applied silently.
    """
    tree = lower
    for entry in entries:
        if entry.op is JournalOp.DELETE_FROM_LOWER:
            if tree.contains(entry.path):
                tree = tree.delete(entry.path)
        elif entry.op is JournalOp.COPY_TO_LOWER:
            if entry.checksum is None:
                existing = tree.get(entry.path)
                if not isinstance(existing, Directory):
                    tree = tree.set(entry.path, Directory(children={}))
            else:
                node = payloads[entry.path]
                payload = _payload(node)
                if payload is None or content_checksum(payload) != entry.checksum:
                    raise ValueError(f"payload checksum mismatch at {entry.path}")
                tree = tree.set(entry.path, node)
        # MARK_OPAQUE_APPLIED records that masking was realized by the
        # surrounding deletions; nothing to replay.
    return tree


def merge_down(stack: LayerStack) -> tuple[LayerTree, MergeJournal]:
    """Merge the upper layer into the lower layer, atomically.

    Value-level form of the administrator's global update: entries are
    staged in full (checksummed) before the merged tree is produced.  For
    on-disk stacks, callers must hold the exclusive commit lock; the
    durable staging/commit/recovery protocol lives in cue.commit.
    """
    entries = stage_merge(stack)
    tree = flatten(stack)
    return tree, MergeJournal(entries=entries, state=JournalState.COMMITTED)
