"""Uni-directional channel families behind one API."""

from __future__ import annotations

from .core import (
    SELECTORS,
    TABLE2,
    ChannelConfig,
    ChannelError,
    ChannelSpec,
    DoubleFree,
    MessageTooLarge,
    NoCredit,
    OptionConsumed,
    RegionOption,
    RequirementUnmet,
    UnknownHandle,
    check_requirements,
    open_channel,
    open_fanin,
    open_fanout,
    spec_for,
)

__all__ = [
    "SELECTORS",
    "TABLE2",
    "ChannelConfig",
    "ChannelError",
    "ChannelSpec",
    "DoubleFree",
    "MessageTooLarge",
    "NoCredit",
    "OptionConsumed",
    "RegionOption",
    "RequirementUnmet",
    "UnknownHandle",
    "check_requirements",
    "open_channel",
    "open_fanin",
    "open_fanout",
    "spec_for",
]
