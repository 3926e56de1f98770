"""Exception types raised by the deployment engine."""
from __future__ import annotations


class DeployError(Exception):
    """Base class for all engine errors."""


class InvalidApplication(DeployError):
    """Raised when an operation needs a valid application and got an invalid one."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations)
        super().__init__(f"invalid application: {lines}")


class CyclicDependency(DeployError):
    def __init__(self, members):
        self.members = tuple(sorted(members))
        super().__init__(f"CyclicDependency{{{','.join(self.members)}}}")


class NoFeasibleNode(DeployError):
    """No online physical node can host a virtual node."""

    def __init__(self, vnode: str, reason: str):
        self.vnode = vnode
        self.reason = reason
        super().__init__(f"NoFeasibleNode{{{vnode}, {reason}}}")


class UnknownComponent(DeployError):
    def __init__(self, component: str):
        self.component = component
        super().__init__(f"UnknownComponent{{{component}}}")


class UnknownNode(DeployError):
    def __init__(self, node: str):
        self.node = node
        super().__init__(f"UnknownNode{{{node}}}")


class AlreadyOffline(DeployError):
    def __init__(self, node: str):
        self.node = node
        super().__init__(f"AlreadyOffline{{{node}}}")


class IllegalTransition(DeployError):
    def __init__(self, subject, state, action_kind):
        self.subject = subject
        self.state = state
        self.action_kind = action_kind
        super().__init__(f"IllegalTransition{{{subject}: {state} -/-> {action_kind}}}")


class WrongNode(DeployError):
    def __init__(self, subject, node: str, expected: str | None):
        self.subject = subject
        self.node = node
        self.expected = expected
        super().__init__(f"WrongNode{{{subject} on {node}, expected {expected}}}")


class NoNodesOnline(DeployError):
    def __init__(self):
        super().__init__("NoNodesOnline")


class NoSpareNode(DeployError):
    """Recovery cannot place a virtual node; carries the best-effort plan."""

    def __init__(self, kind: str, vnode: str, degraded_plan=None, blocked=()):
        self.kind = kind
        self.vnode = vnode
        self.degraded_plan = degraded_plan
        self.blocked = tuple(sorted(blocked))
        super().__init__(f"NoSpareNode{{{kind}}} for virtual node {vnode}")


class ParseError(DeployError):
    """Input document could not be parsed into a model."""


class FlowViolationError(DeployError):
    """Label audit failed; ``violations`` lists the offending flows."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))
