"""Disk-backed layer trees and the lazy merged view.

Layers live as plain directories.  Whiteouts and opaque markers use the
unprivileged-friendly sibling-file convention: a `.wh.<name>` file hides
the lower entry `<name>`, a `.wh..wh..opq` file inside a directory makes
it opaque (kernel overlayfs markers need mknod/xattr privileges).  Names
starting with `.wh.` are therefore reserved inside layers.

DiskOverlay materializes nothing up front: every access loads just the
path slices it needs from each layer, lets the pure model decide what the
merged view contains, and writes the resulting upper-layer delta back.
Lower layers are consulted on every miss, so base updates are visible to
the next lookup; only upper files this view wrote or resolved itself are
path-cached (an upper hit can never be masked by later lower changes).

A view stacks one writable upper over one or more lowers, bottom first;
non-bottom lowers keep their markers, so a user's shared delta can sit
read-only between a node root and a scratch upper.
"""

from __future__ import annotations

import os
import shutil
import stat as stat_m
from pathlib import Path
from typing import Optional, Sequence

from . import model
from .errors import AbsentPath, HiddenPath, NotADirectory, ReadOnlyView, ReservedName
from .model import (
    Directory,
    LayerStack,
    LayerTree,
    Node,
    Origin,
    RegularFile,
    Resolution,
    ResolutionKind,
    Symlink,
    Whiteout,
)

__all__ = ["WH_PREFIX", "OPAQUE_MARKER", "DiskOverlay", "load_tree", "store_tree", "tree_bytes"]

WH_PREFIX = ".wh."
OPAQUE_MARKER = ".wh..wh..opq"


def _is_marker(name: str) -> bool:
    return name.startswith(WH_PREFIX)


def _whiteout_marker(name: str) -> str:
    return WH_PREFIX + name


def _check_component_names(parts: tuple[str, ...]) -> None:
    for part in parts:
        if _is_marker(part):
            raise ReservedName(f"{part!r} collides with the whiteout marker namespace")


# ---------------------------------------------------------------------------
# whole-tree load/store (commit, tests, small trees)

def _classify(real: Path, *, deep: bool, marker_aware: bool) -> Optional[Node]:
    try:
        st = real.lstat()
    except OSError:
        return None
    if stat_m.S_ISLNK(st.st_mode):
        return Symlink(os.readlink(real))
    if stat_m.S_ISDIR(st.st_mode):
        opaque = marker_aware and (real / OPAQUE_MARKER).exists()
        return Directory(children={}, opaque=opaque)
    if stat_m.S_ISREG(st.st_mode):
        return RegularFile(real.read_bytes() if deep else b"")
    return None  # sockets, devices: not modeled; reachable only via bind mounts


def load_tree(root: Path, *, marker_aware: bool = True, deep: bool = True) -> LayerTree:
    """Read a whole layer directory into a model tree."""
    root = Path(root)

    def load_dir(real: Path) -> Directory:
        opaque = marker_aware and (real / OPAQUE_MARKER).exists()
        children: dict[str, Node] = {}
        whiteouts: set[str] = set()
        entries = {}
        for entry in os.scandir(real):
            entries[entry.name] = entry
        for name in entries:
            if name == OPAQUE_MARKER:
                continue
            if _is_marker(name):
                target = name[len(WH_PREFIX):]
                if marker_aware and target and target not in entries:
                    whiteouts.add(target)
                continue
            child = _classify(real / name, deep=deep, marker_aware=marker_aware)
            if isinstance(child, Directory):
                child = load_dir(real / name)
            if child is not None:
                children[name] = child
        for name in whiteouts:
            children[name] = Whiteout()
        return Directory(children=children, opaque=opaque)

    return LayerTree(root=load_dir(root))


def store_tree(tree: LayerTree, root: Path, *, marker_aware: bool = True) -> None:
    """Materialize a model tree into an empty directory."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    def store_dir(node: Directory, real: Path) -> None:
        if node.opaque:
            if not marker_aware:
                raise ValueError("plain tree cannot carry opaque markers")
            (real / OPAQUE_MARKER).touch()
        for name, child in node.children.items():
            _check_component_names((name,))
            target = real / name
            if isinstance(child, Whiteout):
                if not marker_aware:
                    raise ValueError("plain tree cannot carry whiteouts")
                (real / _whiteout_marker(name)).touch()
            elif isinstance(child, RegularFile):
                target.write_bytes(child.content)
            elif isinstance(child, Symlink):
                os.symlink(child.target, target)
            else:
                target.mkdir()
                store_dir(child, target)

    store_dir(tree.root, root)


def tree_bytes(root: Path) -> int:
    """Apparent size of all regular files under root (0 if absent)."""
    root = Path(root)
    if not root.exists():
        return 0
    total = 0
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            try:
                total += (Path(dirpath) / name).lstat().st_size
            except OSError:
                pass
    return total


# ---------------------------------------------------------------------------
# slice loading (lazy per-path access)

def _load_slice(
    layer_root: Path,
    parts: tuple[str, ...],
    *,
    marker_aware: bool,
    content_at_target: bool,
    children_at_target: bool,
) -> LayerTree:
    """Minimal tree holding the ancestor chain of parts (plus, optionally,
    the target's content and shallow children)."""
    tree = model.empty_tree()
    real = Path(layer_root)
    node = _classify(real, deep=False, marker_aware=marker_aware)
    if not isinstance(node, Directory):
        return tree
    tree = LayerTree(root=node)

    reached = True
    for depth, name in enumerate(parts):
        parent_real = real
        real = real / name
        is_target = depth == len(parts) - 1
        child = _classify(
            real,
            deep=content_at_target and is_target,
            marker_aware=marker_aware,
        )
        if child is None and marker_aware and (parent_real / _whiteout_marker(name)).exists():
            child = Whiteout()
        if child is None:
            reached = False
            break
        prefix = model.join_path(parts[: depth + 1])
        tree = tree.set(prefix, child)
        if not isinstance(child, Directory):
            reached = is_target
            break

    if children_at_target and reached:
        target_path = model.join_path(parts)
        target = tree.get(target_path) if parts else tree.root
        if isinstance(target, Directory):
            real_target = Path(layer_root).joinpath(*parts)
            loaded = _shallow_children(real_target, marker_aware=marker_aware)
            filled = Directory(children=loaded, opaque=target.opaque)
            tree = tree.set(target_path, filled) if parts else LayerTree(root=filled)
    return tree


def _shallow_children(real: Path, *, marker_aware: bool) -> dict[str, Node]:
    children: dict[str, Node] = {}
    whiteouts: set[str] = set()
    try:
        names = {entry.name for entry in os.scandir(real)}
    except OSError:
        return children
    for name in names:
        if name == OPAQUE_MARKER:
            continue
        if _is_marker(name):
            target = name[len(WH_PREFIX):]
            if marker_aware and target and target not in names:
                whiteouts.add(target)
            continue
        child = _classify(real / name, deep=False, marker_aware=marker_aware)
        if child is not None:
            children[name] = child
    for name in whiteouts:
        children[name] = Whiteout()
    return children


# ---------------------------------------------------------------------------
# the merged view

class DiskOverlay:
    """Merged view over [lowers..., upper]; bottom layer first."""

    def __init__(
        self,
        lowers: Sequence[Path | str],
        upper: Path | str,
        *,
        read_only: bool = False,
        masks: Sequence[tuple[str, str]] = (),
    ):
        if not lowers:
            raise ValueError("at least one lower layer required")
        self.lowers = [Path(p) for p in lowers]
        self.upper = Path(upper)
        self.read_only = read_only
        self.masks = [(model.normalize(p), mode) for p, mode in masks]
        for _, mode in self.masks:
            if mode not in ("empty", "ro"):
                raise ValueError(f"mask mode must be empty|ro, got {mode!r}")
        self._file_cache: dict[str, Path] = {}

    # -- masks ------------------------------------------------------------

    def _mask_at(self, path: str) -> Optional[tuple[str, str]]:
        best = None
        for mask_path, mode in self.masks:
            if path == mask_path or model.is_strict_prefix(mask_path, path):
                if best is None or len(mask_path) > len(best[0]):
                    best = (mask_path, mode)
        return best

    def _check_writable(self, path: str) -> None:
        if self.read_only:
            raise ReadOnlyView(f"view is read-only: {path}")
        mask = self._mask_at(path)
        if mask is not None:
            raise ReadOnlyView(f"path is masked {mask[1]}: {path}")

    # -- stack assembly ---------------------------------------------------

    def _stack_at(
        self,
        parts: tuple[str, ...],
        *,
        content: bool = False,
        children: bool = False,
    ) -> LayerStack:
        merged_lower = _load_slice(
            self.lowers[0],
            parts,
            marker_aware=False,
            content_at_target=content,
            children_at_target=children,
        )
        for mid in self.lowers[1:]:
            mid_slice = _load_slice(
                mid,
                parts,
                marker_aware=True,
                content_at_target=content,
                children_at_target=children,
            )
            merged_lower = model.flatten(LayerStack(lower=merged_lower, upper=mid_slice))
        upper_slice = _load_slice(
            self.upper,
            parts,
            marker_aware=True,
            content_at_target=content,
            children_at_target=children,
        )
        return LayerStack(lower=merged_lower, upper=upper_slice)

    def _resolve_layer(self, parts: tuple[str, ...], *, content: bool) -> tuple[Resolution, Optional[Path]]:
        """Resolution plus the backing layer directory for found nodes."""
        path = model.join_path(parts)
        layers = [*self.lowers, self.upper]
        # fold bottom-up, remembering which layer provided the hit
        slices = [
            _load_slice(
                layer,
                parts,
                marker_aware=(i > 0),
                content_at_target=content,
                children_at_target=False,
            )
            for i, layer in enumerate(layers)
        ]
        merged = slices[0]
        res = model.resolve(LayerStack(lower=merged, upper=model.empty_tree()), path)
        origin_dir: Optional[Path] = layers[0] if res.found else None
        for i in range(1, len(layers)):
            stack = LayerStack(lower=merged, upper=slices[i])
            nxt = model.resolve(stack, path)
            if nxt.outcome is ResolutionKind.FOUND_UPPER:
                origin_dir = layers[i]
            elif nxt.outcome is not ResolutionKind.FOUND_LOWER:
                origin_dir = None
            merged = model.flatten(stack)
            res = nxt
        return res, origin_dir

    # -- read side ----------------------------------------------------------

    def resolve(self, path: str) -> Resolution:
        parts = model.split_path(path)
        path = model.join_path(parts)
        mask = self._mask_at(path)
        if mask is not None and mask[1] == "empty":
            if path == mask[0]:
                return Resolution(ResolutionKind.FOUND_UPPER, Directory(children={}))
            return Resolution(ResolutionKind.ABSENT)
        cached = self._file_cache.get(path)
        if cached is not None:
            return Resolution(ResolutionKind.FOUND_UPPER, RegularFile(cached.read_bytes()))
        res, origin = self._resolve_layer(parts, content=True)
        if (
            res.outcome is ResolutionKind.FOUND_UPPER
            and origin == self.upper
            and isinstance(res.node, RegularFile)
            and mask is None
            and not self.read_only
        ):
            self._file_cache[path] = self.upper.joinpath(*parts)
        return res

    def real_path(self, path: str) -> Path:
        """Backing file of a resolvable regular file or symlink (any layer)."""
        parts = model.split_path(path)
        cached = self._file_cache.get(model.join_path(parts))
        if cached is not None:
            return cached
        mask = self._mask_at(model.join_path(parts))
        if mask is not None and mask[1] == "empty":
            raise AbsentPath(path)
        res, origin = self._resolve_layer(parts, content=False)
        if not res.found:
            raise (HiddenPath if res.outcome is ResolutionKind.HIDDEN else AbsentPath)(path)
        if isinstance(res.node, Directory):
            raise NotADirectory(f"not a regular file: {path}")
        assert origin is not None
        return origin.joinpath(*parts)

    def read_file(self, path: str) -> bytes:
        cached = self._file_cache.get(path)
        if cached is not None:
            return cached.read_bytes()
        return self.real_path(path).read_bytes()

    def list_dir(self, path: str) -> list[tuple[str, Origin]]:
        parts = model.split_path(path)
        path = model.join_path(parts)
        mask = self._mask_at(path)
        if mask is not None and mask[1] == "empty":
            if path == mask[0]:
                return []
            raise AbsentPath(path)
        stack = self._stack_at(parts, children=True)
        return model.list_dir(stack, path)

    # -- write side ---------------------------------------------------------

    def write_file(self, path: str, data: bytes) -> None:
        cached = self._file_cache.get(path)
        if cached is not None:
            # fast path: path already resolves to an upper file this view owns
            with open(cached, "wb") as fh:
                fh.write(data)
            return
        parts = model.split_path(path)
        path = model.join_path(parts)
        _check_component_names(parts)
        self._check_writable(path)
        stack = self._stack_at(parts, content=True)
        new_stack = model.write_file(stack, path, data)
        clobbered = isinstance(stack.upper.get(path), Directory)
        self._apply_upper_diff(stack.upper, new_stack.upper)
        if clobbered:
            self._file_cache.clear()
        self._file_cache[path] = self.upper.joinpath(*parts)

    def path_for_update(self, path: str) -> Path:
        """Copy the file up if needed and return its real upper path for
        in-place streaming updates."""
        cached = self._file_cache.get(path)
        if cached is not None:
            return cached
        parts = model.split_path(path)
        path = model.join_path(parts)
        _check_component_names(parts)
        self._check_writable(path)
        res, origin = self._resolve_layer(parts, content=False)
        if not res.found:
            raise (HiddenPath if res.outcome is ResolutionKind.HIDDEN else AbsentPath)(path)
        if not isinstance(res.node, RegularFile):
            raise NotADirectory(f"not a regular file: {path}")
        assert origin is not None
        real = self.upper.joinpath(*parts)
        if origin != self.upper:
            # copy-up: ancestors shallowly, then stream the content across
            stack = self._stack_at(parts, content=False)
            placeholder = model.write_file(stack, path, b"")
            self._apply_upper_diff(stack.upper, placeholder.upper)
            with open(origin.joinpath(*parts), "rb") as src, open(real, "wb") as dst:
                shutil.copyfileobj(src, dst, 1024 * 1024)
        self._file_cache[path] = real
        return real

    def remove(self, path: str, recursive: bool = False) -> None:
        parts = model.split_path(path)
        path = model.join_path(parts)
        _check_component_names(parts)
        self._check_writable(path)
        stack = self._stack_at(parts, content=False, children=True)
        new_stack = model.remove(stack, path, recursive=recursive)
        self._apply_upper_diff(stack.upper, new_stack.upper)
        self._file_cache.clear()

    # -- applying the model's upper delta to disk ---------------------------

    def _apply_upper_diff(self, old: LayerTree, new: LayerTree) -> None:
        def place(parts: tuple[str, ...], node: Node) -> None:
            real = self.upper.joinpath(*parts)
            marker = self.upper.joinpath(*parts[:-1], _whiteout_marker(parts[-1]))
            _rm_real(real)
            marker.unlink(missing_ok=True)
            if isinstance(node, Whiteout):
                marker.touch()
            elif isinstance(node, RegularFile):
                with open(real, "wb") as fh:
                    fh.write(node.content)
            elif isinstance(node, Symlink):
                os.symlink(node.target, real)
            else:
                real.mkdir()
                if node.opaque:
                    (real / OPAQUE_MARKER).touch()

        def drop(parts: tuple[str, ...]) -> None:
            real = self.upper.joinpath(*parts)
            _rm_real(real)
            self.upper.joinpath(*parts[:-1], _whiteout_marker(parts[-1])).unlink(missing_ok=True)

        def rec(parts: tuple[str, ...], old_node: Optional[Node], new_node: Optional[Node]) -> None:
            if old_node == new_node:
                return
            if new_node is None:
                drop(parts)
                return
            if isinstance(old_node, Directory) and isinstance(new_node, Directory):
                if old_node.opaque != new_node.opaque:
                    marker = self.upper.joinpath(*parts, OPAQUE_MARKER)
                    if new_node.opaque:
                        marker.touch()
                    else:
                        marker.unlink(missing_ok=True)
                for name in set(old_node.children) | set(new_node.children):
                    rec(
                        parts + (name,),
                        old_node.children.get(name),
                        new_node.children.get(name),
                    )
                return
            place(parts, new_node)
            if isinstance(new_node, Directory):
                for name, child in new_node.children.items():
                    rec(parts + (name,), None, child)

        rec((), old.root, new.root)


def _rm_real(real: Path) -> None:
    try:
        st = real.lstat()
    except OSError:
        return
    if os.path.stat.S_ISDIR(st.st_mode):
        shutil.rmtree(real)
    else:
        real.unlink()
