"""Seeded random stack generation for oracle and property tests."""

from __future__ import annotations

import random

from cue.model import (
    Directory,
    LayerStack,
    LayerTree,
    Node,
    RegularFile,
    Symlink,
    Whiteout,
    join_path,
)

NAMES = ["a", "b", "c", "d", "lib", "etc", "bin", "x1", "x2"]


def build_tree(spec: dict) -> LayerTree:
    """Nested-dict tree builder: bytes -> file, dict -> dir, Node -> as-is.

    A dict may carry the key "__opaque__": True for an opaque directory.
    """

    def conv(value) -> Node:
        if isinstance(value, bytes):
            return RegularFile(value)
        if isinstance(value, dict):
            opaque = bool(value.get("__opaque__", False))
            children = {
                name: conv(child)
                for name, child in value.items()
                if name != "__opaque__"
            }
            return Directory(children=children, opaque=opaque)
        if isinstance(value, (RegularFile, Symlink, Whiteout, Directory)):
            return value
        raise TypeError(f"cannot build node from {value!r}")

    root = conv(spec)
    assert isinstance(root, Directory)
    return LayerTree(root=root)


def random_lower(rng: random.Random, max_depth: int = 6, node_budget: int = 100) -> LayerTree:
    budget = [rng.randint(0, node_budget)]

    def gen_dir(depth: int) -> Directory:
        children: dict[str, Node] = {}
        for name in rng.sample(NAMES, k=rng.randint(0, min(5, len(NAMES)))):
            if budget[0] <= 0:
                break
            budget[0] -= 1
            roll = rng.random()
            if depth < max_depth and roll < 0.4:
                children[name] = gen_dir(depth + 1)
            elif roll < 0.9:
                children[name] = RegularFile(rng.randbytes(rng.randint(0, 24)))
            else:
                children[name] = Symlink("/" + rng.choice(NAMES))
        return Directory(children=children)

    return LayerTree(root=gen_dir(1))


def random_upper(rng: random.Random, lower: LayerTree, max_depth: int = 6, node_budget: int = 100) -> LayerTree:
    """Delta over lower: overrides, whiteouts, opaque dirs, fresh subtrees."""
    budget = [rng.randint(0, node_budget)]

    def lower_at(parts: tuple[str, ...]):
        return lower.get(join_path(parts)) if parts else lower.root

    def gen_dir(parts: tuple[str, ...], depth: int) -> Directory:
        low = lower_at(parts)
        low_names = list(low.children) if isinstance(low, Directory) else []
        pool = list(dict.fromkeys(low_names + NAMES))
        children: dict[str, Node] = {}
        for name in rng.sample(pool, k=rng.randint(0, min(5, len(pool)))):
            if budget[0] <= 0:
                break
            budget[0] -= 1
            roll = rng.random()
            if roll < 0.18:
                children[name] = Whiteout()
            elif depth < max_depth and roll < 0.5:
                children[name] = gen_dir(parts + (name,), depth + 1)
            elif roll < 0.92:
                children[name] = RegularFile(rng.randbytes(rng.randint(0, 24)))
            else:
                children[name] = Symlink("/" + rng.choice(NAMES))
        opaque = depth > 0 and rng.random() < 0.15
        return Directory(children=children, opaque=opaque)

    return LayerTree(root=gen_dir((), 0))


def random_stack(seed: int, max_depth: int = 6, node_budget: int = 100) -> LayerStack:
    rng = random.Random(seed)
    lower = random_lower(rng, max_depth, node_budget)
    upper = random_upper(rng, lower, max_depth, node_budget)
    return LayerStack(lower=lower, upper=upper)


def probe_paths(stack: LayerStack) -> list[str]:
    """Every path of both layers plus some never-present probes."""
    paths = {p for p, _ in stack.lower.walk()} | {p for p, _ in stack.upper.walk()}
    paths.discard("/")
    extra = set()
    for p in list(paths)[:20]:
        extra.add(p + "/ghost")
        extra.add("/ghost" + p)
    return sorted(paths | extra | {"/nope", "/lib/nope"})
