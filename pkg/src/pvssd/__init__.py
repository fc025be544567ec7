"""Desk-scale simulator of a policy-based per-file versioning SSD."""

from ._jit import NUMBA_ENABLED
from .channel import SealedRequest, Sealer, seal, verify
from .device import Decision, Device, GcReport, VersionChainEntry, pv_decide
from .host import HostShim, parse_spm
from .nand import NandCosts, NandGeometry, OobRecord, PageState, Zone
from .pmeta import PMeta
from .policy import TOMBSTONE, UNKNOWN, Policy, PolicyOp, PolicyRequest
from .recovery import RecoveredPage, fast_recover, reconstruct, robust_recover

__all__ = [
    "NUMBA_ENABLED", "SealedRequest", "Sealer", "seal", "verify", "Decision", "Device",
    "GcReport", "VersionChainEntry", "pv_decide", "HostShim", "parse_spm", "NandCosts",
    "NandGeometry", "OobRecord", "PageState", "Zone", "PMeta", "TOMBSTONE", "UNKNOWN", "Policy",
    "PolicyOp", "PolicyRequest", "RecoveredPage", "fast_recover", "reconstruct", "robust_recover",
]
