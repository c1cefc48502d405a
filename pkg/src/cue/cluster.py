"""Shared-storage user layers across login and compute nodes.

Every user's upper layer lives once, in shared storage.  Logging in
overlays it writable onto the login node's root; submitting a job
attaches the same upper read-only onto each allocated compute node's
root, topped by a per-node scratch layer that is discarded at release.
Attachment moves no content, so deploying a 100 MiB customization costs
the same as deploying a 1 MiB one.

Desk scale: a "node" is any directory standing in for a node's "/",
declared in a nodes.json manifest ([{"node_id": ..., "node_root": ...}]).
"""

from __future__ import annotations

import json
import shutil
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .diskfs import DiskOverlay
from .errors import NotFound, SharedStorageUnavailable
from .executor import Backend, execute
from .planner import ContainerConfig, MaskMode, plan_create
from .registry import ContainerRecord, Registry

__all__ = [
    "SharedLayout",
    "NodeHandle",
    "NodeStatus",
    "DeploymentResult",
    "load_manifest",
    "attach_login",
    "deploy_job",
    "release_job",
    "node_view",
]

SHARED_ROOT_ENV = "CUE_SHARED_ROOT"


@dataclass(frozen=True)
class SharedLayout:
    shared_root: Path

    def user_dir(self, user: str) -> Path:
        return Path(self.shared_root) / "users" / user

    def upper(self, user: str) -> Path:
        return self.user_dir(user) / "upper"

    def work(self, user: str) -> Path:
        return self.user_dir(user) / "work"

    def ensure_user(self, user: str) -> None:
        root = Path(self.shared_root)
        try:
            root.mkdir(parents=True, exist_ok=True)
        except OSError as err:
            raise SharedStorageUnavailable(f"{root}: {err}") from err
        if not root.is_dir():
            raise SharedStorageUnavailable(f"not a directory: {root}")
        self.upper(user).mkdir(parents=True, exist_ok=True)
        self.work(user).mkdir(parents=True, exist_ok=True)


@dataclass(frozen=True)
class NodeHandle:
    node_id: str
    node_root: Path

    def validate(self) -> None:
        if not Path(self.node_root).is_dir():
            raise NotFound(f"node root missing: {self.node_root}")


def load_manifest(path: str | Path) -> list[NodeHandle]:
    entries = json.loads(Path(path).read_text(encoding="utf-8"))
    return [NodeHandle(e["node_id"], Path(e["node_root"])) for e in entries]


@dataclass(frozen=True)
class NodeStatus:
    node_id: str
    status: str  # Attached | Failed | Released | NotFound
    detail: str = ""
    elapsed_us: int = 0


@dataclass(frozen=True)
class DeploymentResult:
    per_node: tuple[NodeStatus, ...]

    @property
    def all_attached(self) -> bool:
        return all(n.status == "Attached" for n in self.per_node)

    def to_json(self) -> str:
        return json.dumps(
            [
                {
                    "node_id": n.node_id,
                    "status": n.status,
                    "detail": n.detail,
                    "elapsed_us": n.elapsed_us,
                }
                for n in self.per_node
            ],
            indent=2,
        )


def _now_us() -> int:
    return time.perf_counter_ns() // 1000


def _deploy_dir(state_root: Path, user: str, node_id: str) -> Path:
    return Path(state_root) / "cluster" / user / f"node-{node_id}"


def attach_login(
    user: str,
    login_node: NodeHandle,
    *,
    shared: SharedLayout,
    registry: Registry,
    backend: Backend | str = Backend.SANDBOX,
) -> ContainerRecord:
    """Overlay the user's shared upper onto the login node's root.

    First login creates the empty upper; later logins reuse it, so every
    customization survives across sessions.
    """
    login_node.validate()
    shared.ensure_user(user)
    merged = Path(registry.state_root) / "cluster" / user / f"login-{login_node.node_id}" / "merged"
    config = ContainerConfig(
        user=user,
        host_root=str(login_node.node_root),
        upper_dir=str(shared.upper(user)),
        work_dir=str(shared.work(user)),
        merged_dir=str(merged),
        mask_paths=((str(registry.state_root), MaskMode.EMPTY_BIND),),
    )
    with registry.acquire_record_lock(user, "User", blocking=True):
        execute(plan_create(config), backend)
        record = ContainerRecord(
            user=user,
            upper_dir=config.upper_dir,
            work_dir=config.work_dir,
            merged_dir=config.merged_dir,
            hostname=config.hostname,
            status="Running",
        )
        if registry.lookup(user, "User") is None:
            registry.register(record)
        else:
            registry.update(record)
    return record


def login_view(user: str, login_node: NodeHandle, *, shared: SharedLayout) -> DiskOverlay:
    """The merged view a logged-in user works in (writable shared upper)."""
    return DiskOverlay([login_node.node_root], shared.upper(user))


def _run_hook(hook: Optional[str]) -> None:
    # job-manager integration is a shell-out, not a scheduler plugin
    if hook:
        subprocess.run(hook, shell=True, check=True)


def deploy_job(
    user: str,
    nodes: Sequence[NodeHandle],
    *,
    shared: SharedLayout,
    registry: Registry,
    pre_hook: Optional[str] = None,
    post_hook: Optional[str] = None,
) -> DeploymentResult:
    """Attach the user's shared upper read-only onto each node root, topped
    by a per-node scratch layer.  Nothing is copied; partial failure leaves
    the other nodes attached.  pre_hook/post_hook shell out around the
    whole attachment (the scheduler prolog/epilog seam)."""
    if not Path(shared.shared_root).is_dir():
        raise SharedStorageUnavailable(str(shared.shared_root))
    if not shared.upper(user).is_dir():
        raise NotFound(f"no shared upper layer for user {user!r}")
    _run_hook(pre_hook)
    statuses: list[NodeStatus] = []
    for node in nodes:
        t0 = _now_us()
        try:
            node.validate()
            deploy = _deploy_dir(registry.state_root, user, node.node_id)
            if (deploy / "attachment.json").exists():
                raise NotFound(f"node {node.node_id} already attached")
            (deploy / "scratch").mkdir(parents=True)
            (deploy / "merged").mkdir()
            attachment = {
                "user": user,
                "node_id": node.node_id,
                "node_root": str(node.node_root),
                "shared_upper": str(shared.upper(user)),
                "scratch": str(deploy / "scratch"),
                "merged": str(deploy / "merged"),
            }
            (deploy / "attachment.json").write_text(
                json.dumps(attachment, indent=2) + "\n", encoding="utf-8"
            )
            statuses.append(
                NodeStatus(node.node_id, "Attached", elapsed_us=_now_us() - t0)
            )
        except Exception as err:  # per-node isolation: never abort the rest
            statuses.append(
                NodeStatus(node.node_id, "Failed", str(err), _now_us() - t0)
            )
    _run_hook(post_hook)
    return DeploymentResult(per_node=tuple(statuses))


def node_view(user: str, node: NodeHandle, *, registry: Registry) -> DiskOverlay:
    """Merged view on a compute node: node root, then the user's shared
    upper (read-only), then the node's scratch on top."""
    deploy = _deploy_dir(registry.state_root, user, node.node_id)
    meta_path = deploy / "attachment.json"
    if not meta_path.exists():
        raise NotFound(f"user {user!r} is not deployed on node {node.node_id}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    return DiskOverlay(
        [meta["node_root"], meta["shared_upper"]],
        meta["scratch"],
    )


def release_job(
    user: str,
    nodes: Sequence[NodeHandle],
    *,
    registry: Registry,
) -> DeploymentResult:
    """Tear down per-node attachments; the shared upper is untouched."""
    statuses: list[NodeStatus] = []
    for node in nodes:
        t0 = _now_us()
        deploy = _deploy_dir(registry.state_root, user, node.node_id)
        if not (deploy / "attachment.json").exists():
            statuses.append(NodeStatus(node.node_id, "NotFound", elapsed_us=_now_us() - t0))
            continue
        shutil.rmtree(deploy, ignore_errors=True)
        statuses.append(NodeStatus(node.node_id, "Released", elapsed_us=_now_us() - t0))
    return DeploymentResult(per_node=tuple(statuses))
