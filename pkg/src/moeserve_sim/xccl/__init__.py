"""Communication primitives over the emulated shared-memory fabric."""

from .p2p import Channel, TransferHandle, TransferRequest, UsageError, XcclP2P

__all__ = ["Channel", "TransferHandle", "TransferRequest", "UsageError", "XcclP2P"]
