"""Exception types shared across the simulator."""

from __future__ import annotations


class SimError(Exception):
    """Base class for all simulator errors."""


class NotFoundError(SimError):
    """Unknown preset or named entity."""


class ShapeError(SimError):
    """Tensor shapes are inconsistent at the named node."""

    def __init__(self, node_id: str, message: str):
        super().__init__(f"{node_id}: {message}")
        self.node_id = node_id


class NumericsError(SimError):
    """Non-finite values produced at the named node."""

    def __init__(self, node_id: str):
        super().__init__(f"non-finite values produced at node {node_id}")
        self.node_id = node_id


class CapacityError(SimError):
    """On-chip buffer capacity exceeded.

    Carries the requested and available byte counts so callers can report
    the deficit; this is how infeasible tilings and fusion groups surface.
    """

    def __init__(self, requested: int, available: int, what: str = "allocation"):
        super().__init__(
            f"{what} needs {requested} B but only {available} B available "
            f"(deficit {requested - available} B)"
        )
        self.requested = requested
        self.available = available


class UseAfterFreeError(SimError):
    """Access to a scratchpad region that is not live."""


class NoFeasibleTilingError(SimError):
    """No attention tiling fits the scratchpad, even at minimum tile size."""


class NoFeasiblePlanError(SimError):
    """Some layer cannot be scheduled even as a singleton group at minimum tile."""


class AttentionInSliceError(SimError):
    """Attention is global over tokens and cannot be spatially haloed."""


class InconsistentStatsError(SimError):
    """Sparsity stats do not belong to the cost report being adjusted."""


class ConfigError(SimError):
    """Malformed experiment configuration; message names the offending field."""
