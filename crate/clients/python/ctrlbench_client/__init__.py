"""Reference client for the ctrlbench bridge (protocol v1)."""

from .policy import PDPolicy, Policy, load_policy
from .protocol import PROTOCOL_VERSION, serve

__all__ = ["PDPolicy", "Policy", "load_policy", "serve", "PROTOCOL_VERSION"]
