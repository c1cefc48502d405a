"""Disk-backed layers must agree with the pure model byte for byte."""

import random

import pytest

import oracle
import stackgen
from cue import model
from cue.diskfs import DiskOverlay, load_tree, store_tree, tree_bytes
from cue.errors import (
    AbsentParent,
    AbsentPath,
    DirectoryNotEmpty,
    NotADirectory,
    ReadOnlyView,
    ReservedName,
)
from cue.model import LayerStack, RegularFile, ResolutionKind, Whiteout


@pytest.fixture
def layers(tmp_path):
    lower = tmp_path / "lower"
    upper = tmp_path / "upper"
    lower.mkdir()
    upper.mkdir()
    return lower, upper


def materialize(stack: LayerStack, lower, upper) -> DiskOverlay:
    store_tree(stack.lower, lower, marker_aware=False)
    store_tree(stack.upper, upper, marker_aware=True)
    return DiskOverlay([lower], upper)


class TestTreeStoreLoad:
    def test_round_trip_plain(self, tmp_path):
        tree = stackgen.random_lower(random.Random(7))
        store_tree(tree, tmp_path / "t", marker_aware=False)
        assert load_tree(tmp_path / "t", marker_aware=False) == tree

    def test_round_trip_with_markers(self, tmp_path):
        for seed in range(25):
            stack = stackgen.random_stack(seed)
            target = tmp_path / f"u{seed}"
            store_tree(stack.upper, target, marker_aware=True)
            assert load_tree(target, marker_aware=True) == stack.upper, seed

    def test_plain_store_rejects_markers(self, tmp_path):
        stack = stackgen.build_tree({"x": Whiteout()})
        with pytest.raises(ValueError):
            store_tree(stack, tmp_path / "t", marker_aware=False)

    def test_tree_bytes(self, tmp_path):
        store_tree(stackgen.build_tree({"a": b"12345", "d": {"b": b"67"}}), tmp_path / "t")
        assert tree_bytes(tmp_path / "t") == 7
        assert tree_bytes(tmp_path / "missing") == 0


class TestViewAgainstModel:
    def test_resolution_equivalence_on_seeded_stacks(self, tmp_path):
        for seed in range(40):
            stack = stackgen.random_stack(seed, node_budget=40)
            lower = tmp_path / f"l{seed}"
            upper = tmp_path / f"u{seed}"
            view = materialize(stack, lower, upper)
            for path in stackgen.probe_paths(stack):
                want = model.resolve(stack, path)
                got = view.resolve(path)
                assert got.outcome is want.outcome, (seed, path)
                if isinstance(want.node, RegularFile):
                    assert got.node == want.node, (seed, path)

    def test_listing_equivalence(self, tmp_path):
        for seed in range(25):
            stack = stackgen.random_stack(seed, node_budget=40)
            view = materialize(stack, tmp_path / f"l{seed}", tmp_path / f"u{seed}")
            for path, kind in oracle.visible_paths(stack).items():
                if kind != ("dir",):
                    continue
                assert view.list_dir(path) == model.list_dir(stack, path), (seed, path)

    def test_random_op_sequences_stay_equivalent(self, tmp_path):
        rng = random.Random(1234)
        for seed in range(15):
            stack = stackgen.random_stack(seed, node_budget=30)
            lower = tmp_path / f"l{seed}"
            upper = tmp_path / f"u{seed}"
            view = materialize(stack, lower, upper)
            lower_before = load_tree(lower, marker_aware=False)
            for _ in range(12):
                path = rng.choice(stackgen.probe_paths(stack))
                if rng.random() < 0.6:
                    data = rng.randbytes(rng.randint(0, 20))
                    try:
                        expected = model.write_file(stack, path, data)
                        view.write_file(path, data)
                        stack = expected
                    except (AbsentParent, NotADirectory, ReservedName) as err:
                        with pytest.raises(type(err)):
                            view.write_file(path, data)
                else:
                    try:
                        expected = model.remove(stack, path, recursive=True)
                        view.remove(path, recursive=True)
                        stack = expected
                    except (AbsentPath, ReservedName) as err:
                        with pytest.raises(type(err)):
                            view.remove(path, recursive=True)
            assert load_tree(upper, marker_aware=True) == stack.upper, seed
            assert load_tree(lower, marker_aware=False) == lower_before, seed

    def test_write_lands_in_upper_only(self, layers):
        lower, upper = layers
        (lower / "lib").mkdir()
        (lower / "lib" / "libc.so").write_bytes(b"glibc 2.31")
        view = DiskOverlay([lower], upper)
        view.write_file("/lib/libc.so", b"glibc 2.35")
        assert (upper / "lib" / "libc.so").read_bytes() == b"glibc 2.35"
        assert (lower / "lib" / "libc.so").read_bytes() == b"glibc 2.31"
        assert view.read_file("/lib/libc.so") == b"glibc 2.35"

    def test_lower_update_visible_immediately(self, layers):
        lower, upper = layers
        (lower / "bin").mkdir()
        (lower / "bin" / "python").write_bytes(b"2.7")
        view = DiskOverlay([lower], upper)
        assert view.read_file("/bin/python") == b"2.7"
        (lower / "bin" / "python").write_bytes(b"3.0")
        assert view.read_file("/bin/python") == b"3.0"

    def test_customized_file_keeps_priority_over_lower_update(self, layers):
        lower, upper = layers
        (lower / "bin").mkdir()
        (lower / "bin" / "python").write_bytes(b"2.7")
        view = DiskOverlay([lower], upper)
        view.write_file("/bin/python", b"3.5")
        (lower / "bin" / "python").write_bytes(b"3.0")
        assert view.read_file("/bin/python") == b"3.5"
        assert view.resolve("/bin/python").outcome is ResolutionKind.FOUND_UPPER

    def test_remove_places_marker(self, layers):
        lower, upper = layers
        (lower / "etc").mkdir()
        (lower / "etc" / "motd").write_bytes(b"hi")
        view = DiskOverlay([lower], upper)
        view.remove("/etc/motd")
        assert (upper / "etc" / ".wh.motd").exists()
        assert view.resolve("/etc/motd").outcome is ResolutionKind.HIDDEN
        assert (lower / "etc" / "motd").exists()

    def test_remove_nonempty_requires_recursive(self, layers):
        lower, upper = layers
        (lower / "d").mkdir()
        (lower / "d" / "f").write_bytes(b"x")
        view = DiskOverlay([lower], upper)
        with pytest.raises(DirectoryNotEmpty):
            view.remove("/d")
        view.remove("/d", recursive=True)
        assert view.resolve("/d").outcome is ResolutionKind.HIDDEN

    def test_reserved_names_rejected(self, layers):
        lower, upper = layers
        view = DiskOverlay([lower], upper)
        with pytest.raises(ReservedName):
            view.write_file("/.wh.trick", b"x")


class TestPathForUpdate:
    def test_copy_up_then_in_place(self, layers):
        lower, upper = layers
        (lower / "data").mkdir()
        (lower / "data" / "blob").write_bytes(b"\x00" * 4096)
        view = DiskOverlay([lower], upper)
        real = view.path_for_update("/data/blob")
        assert real == upper / "data" / "blob"
        assert real.read_bytes() == b"\x00" * 4096
        with open(real, "r+b") as fh:
            fh.write(b"\xff")
        assert view.read_file("/data/blob")[:1] == b"\xff"
        assert (lower / "data" / "blob").read_bytes() == b"\x00" * 4096

    def test_second_call_is_cached(self, layers):
        lower, upper = layers
        (lower / "f").write_bytes(b"abc")
        view = DiskOverlay([lower], upper)
        first = view.path_for_update("/f")
        assert view.path_for_update("/f") == first


class TestMasks:
    def test_empty_mask_hides_subtree(self, layers):
        lower, upper = layers
        (lower / "var").mkdir()
        (lower / "var" / "secret").write_bytes(b"s")
        view = DiskOverlay([lower], upper, masks=[("/var", "empty")])
        assert view.list_dir("/var") == []
        assert view.resolve("/var/secret").outcome is ResolutionKind.ABSENT
        with pytest.raises(ReadOnlyView):
            view.write_file("/var/new", b"x")

    def test_ro_mask_allows_reads(self, layers):
        lower, upper = layers
        (lower / "etc").mkdir()
        (lower / "etc" / "conf").write_bytes(b"c")
        view = DiskOverlay([lower], upper, masks=[("/etc", "ro")])
        assert view.read_file("/etc/conf") == b"c"
        with pytest.raises(ReadOnlyView):
            view.write_file("/etc/conf", b"d")
        with pytest.raises(ReadOnlyView):
            view.remove("/etc/conf")

    def test_read_only_view(self, layers):
        lower, upper = layers
        (lower / "f").write_bytes(b"x")
        view = DiskOverlay([lower], upper, read_only=True)
        assert view.read_file("/f") == b"x"
        with pytest.raises(ReadOnlyView):
            view.write_file("/f", b"y")


class TestThreeLayerFold:
    def test_mid_layer_markers_honored(self, tmp_path):
        bottom = tmp_path / "node-root"
        mid = tmp_path / "shared-upper"
        top = tmp_path / "scratch"
        for d in (bottom, mid, top):
            d.mkdir()
        (bottom / "etc").mkdir()
        (bottom / "etc" / "motd").write_bytes(b"node")
        (bottom / "etc" / "gone").write_bytes(b"old")
        (mid / "etc").mkdir()
        (mid / "etc" / "motd").write_bytes(b"custom")
        (mid / "etc" / ".wh.gone").touch()
        view = DiskOverlay([bottom, mid], top)
        assert view.read_file("/etc/motd") == b"custom"
        assert not view.resolve("/etc/gone").found
        # writes land in the scratch top, never in the shared mid layer
        view.write_file("/etc/motd", b"job-local")
        assert (top / "etc" / "motd").read_bytes() == b"job-local"
        assert (mid / "etc" / "motd").read_bytes() == b"custom"
        assert [n for n, _ in view.list_dir("/etc")] == ["motd"]
