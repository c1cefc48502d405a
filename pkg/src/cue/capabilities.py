"""Capability confinement tables for user containers.

Users get part of root's privileges inside their own container: enough to
bypass file permission checks and manage their own processes, never enough
to mount, load kernel modules, reboot, mknod, or touch the network stack.
The tables are compiled-in constants; evaluation is default-deny.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from types import MappingProxyType
from typing import Mapping

__all__ = ["Decision", "CapabilitySet", "user_policy", "root_sandbox_policy"]

_CAP_NAME = re.compile(r"^CAP_[A-Z_]+$")


class Decision(Enum):
    ALLOW = "Allow"
    DENY = "Deny"


@dataclass(frozen=True)
class CapabilitySet:
    """Allow/deny table over capability names, closed under a default."""

    decisions: Mapping[str, Decision]
    default: Decision = Decision.DENY

    def __post_init__(self) -> None:
        for name in self.decisions:
            if not _CAP_NAME.match(name):
                raise ValueError(f"not a capability name: {name!r}")
        object.__setattr__(self, "decisions", MappingProxyType(dict(self.decisions)))

    def evaluate(self, name: str) -> Decision:
        if not _CAP_NAME.match(name):
            raise ValueError(f"not a capability name: {name!r}")
        return self.decisions.get(name, self.default)

    def allowed(self) -> tuple[str, ...]:
        return tuple(
            sorted(n for n, d in self.decisions.items() if d is Decision.ALLOW)
        )

    def explicitly_denied(self) -> tuple[str, ...]:
        return tuple(
            sorted(n for n, d in self.decisions.items() if d is Decision.DENY)
        )

    def dump(self) -> str:
        """One `<CAP_NAME> <Allow|Deny>` line per listed capability, sorted,
        then the default."""
        lines = [f"{name} {self.decisions[name].value}" for name in sorted(self.decisions)]
        lines.append(f"DEFAULT {self.default.value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse_dump(cls, text: str) -> "CapabilitySet":
        decisions: dict[str, Decision] = {}
        default = Decision.DENY
        for line in text.splitlines():
            if not line.strip():
                continue
            name, verdict = line.split()
            if name == "DEFAULT":
                default = Decision(verdict)
            else:
                decisions[name] = Decision(verdict)
        return cls(decisions=decisions, default=default)

    def plan_token(self) -> str:
        """Canonical single-token form used in serialized setup plans."""
        allow = ",".join(self.allowed()) or "-"
        deny = ",".join(self.explicitly_denied()) or "-"
        return f"allow={allow} deny={deny} default={self.default.value.lower()}"


# Granted: file/directory permission bypass for customization, ownership and
# mode management of the user's own tree, uid/gid changes for in-container
# services, and signalling the user's own processes.
_ALLOW = (
    "CAP_CHOWN",
    "CAP_DAC_OVERRIDE",
    "CAP_DAC_READ_SEARCH",
    "CAP_FOWNER",
    "CAP_FSETID",
    "CAP_KILL",
    "CAP_SETGID",
    "CAP_SETUID",
)

# Explicitly denied even though the default already denies: these are the
# capabilities whose absence the runtime is *about* (mount/umount, kernel
# modules, reboot, mknod, and the whole network family).
_DENY = (
    "CAP_MKNOD",
    "CAP_NET_ADMIN",
    "CAP_NET_BIND_SERVICE",
    "CAP_NET_BROADCAST",
    "CAP_NET_RAW",
    "CAP_SYS_ADMIN",
    "CAP_SYS_BOOT",
    "CAP_SYS_MODULE",
)

_USER_POLICY = CapabilitySet(
    decisions={
        **{name: Decision.ALLOW for name in _ALLOW},
        **{name: Decision.DENY for name in _DENY},
    }
)

# The administrator's update sandbox gets no extra named capabilities: the
# whole point is that mount/umount and the rest stay forbidden inside any
# container. Kept separate so it is the single place to widen if needed.
_ROOT_SANDBOX_POLICY = CapabilitySet(decisions=dict(_USER_POLICY.decisions))


def user_policy() -> CapabilitySet:
    return _USER_POLICY


def root_sandbox_policy() -> CapabilitySet:
    return _ROOT_SANDBOX_POLICY
