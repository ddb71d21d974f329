"""Checkpoint synchronisation points."""

from __future__ import annotations

from typing import Sequence

from ..locks import LockMode
from ..mapping import SyncReport
from ..window import Window


def checkpoint(w: Window) -> SyncReport:
    """Quiesce the local window with an exclusive self-lock, flush, release.

    No barrier: other ranks only wait if they hold or request a lock on
    this rank's window meanwhile.
    """
    me = w.group.my_rank
    w.lock(me, LockMode.EXCLUSIVE)
    try:
        return w.win_sync()
    finally:
        w.unlock(me)


def swap_checkpoint(pair: Sequence[Window], active: int) -> int:
    """Flush the active window of a two-window pair and make the other one
    active. Each flush only covers what changed on the window being
    retired."""
    if len(pair) != 2 or active not in (0, 1):
        raise ValueError("swap_checkpoint needs two windows and active in {0, 1}")
    checkpoint(pair[active])
    return 1 - active
