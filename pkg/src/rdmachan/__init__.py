"""Simulated RDMA fabric and the uni-directional data channels built on it."""

from __future__ import annotations

from .channels import (
    SELECTORS,
    TABLE2,
    ChannelConfig,
    ChannelError,
    RequirementUnmet,
    open_channel,
    open_fanin,
    open_fanout,
    spec_for,
)
from .fabric import EFA, IB_ROCE, ONE_RMA, PROFILES, Fabric, GlobalStall, create_fabric, profile_by_name
from .memory import Access, Location, Region

__version__ = "0.1.0"
