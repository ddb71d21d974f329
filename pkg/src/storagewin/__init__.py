"""One-sided communication windows backed by memory, storage, or both."""

from .errors import StorageWinError
from .hints import AUTO, AllocationHints, AllocType, Order, parse_hints
from .locks import LockMode
from .window import Window, allocate, allocate_shared, create_dynamic, free

__version__ = "0.1.0"

__all__ = [
    "StorageWinError", "AUTO", "AllocationHints", "AllocType", "Order", "parse_hints",
    "LockMode", "Window", "allocate", "allocate_shared", "create_dynamic", "free",
]
