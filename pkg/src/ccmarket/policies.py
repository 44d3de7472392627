"""Balancing reserve policy identifiers shared across modules."""

from __future__ import annotations

import enum

__all__ = ["Policy"]


class Policy(str, enum.Enum):
    """Rule mapping realized forecast errors to generator recourse."""

    DETERMINISTIC = "det"
    SW_SB = "sw-sb"     # system-wide, symmetric
    N2N_SB = "n2n-sb"   # node-to-node, symmetric
    SW_AB = "sw-ab"     # system-wide, asymmetric
    N2N_AB = "n2n-ab"   # node-to-node, asymmetric

    @property
    def asymmetric(self) -> bool:
        return self in (Policy.SW_AB, Policy.N2N_AB)

    @property
    def nodal(self) -> bool:
        return self in (Policy.N2N_SB, Policy.N2N_AB)

    @property
    def stochastic(self) -> bool:
        return self is not Policy.DETERMINISTIC

    @classmethod
    def parse(cls, value) -> "Policy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(p.value for p in cls)
            raise ValueError(f"unknown policy {value!r}; expected one of: {names}") from None
