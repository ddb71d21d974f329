import enum
import threading


class LockMode(enum.IntEnum):
    SHARED = 0
    EXCLUSIVE = 1


class RWLock:
    """Reader/writer lock with writer preference.

    Not owner-tracked: release may happen on a different thread than the
    acquire, which the socket server relies on.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False
        self._waiting_writers = 0

    def acquire(self, mode: LockMode) -> None:
        with self._cond:
            if mode is LockMode.EXCLUSIVE:
                self._waiting_writers += 1
                try:
                    while self._writer or self._readers:
                        self._cond.wait()
                finally:
                    self._waiting_writers -= 1
                self._writer = True
            else:
                while self._writer or self._waiting_writers:
                    self._cond.wait()
                self._readers += 1

    def release(self, mode: LockMode) -> None:
        with self._cond:
            if mode is LockMode.EXCLUSIVE:
                if not self._writer:
                    raise RuntimeError("exclusive release without holder")
                self._writer = False
            else:
                if not self._readers:
                    raise RuntimeError("shared release without holder")
                self._readers -= 1
            self._cond.notify_all()

    @property
    def state(self) -> tuple[int, bool]:
        with self._cond:
            return self._readers, self._writer
