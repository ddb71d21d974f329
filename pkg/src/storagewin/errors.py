"""Exception hierarchy.

Every error carries a wire ``status`` (used in reply frames) and a CLI
``exit_code``. Codes are stable; see README for the table.
"""


class StorageWinError(Exception):
    status = 255
    exit_code = 1


# -- hints ------------------------------------------------------------------

class HintError(StorageWinError):
    exit_code = 2


class MalformedValue(HintError):
    status = 20


class MissingFilename(HintError):
    status = 21


class InvalidCombination(HintError):
    status = 22


# -- mapping ----------------------------------------------------------------

class MappingError(StorageWinError):
    exit_code = 3

    def __init__(self, msg, errno=None):
        super().__init__(msg)
        self.errno = errno


class FileCreateFailed(MappingError):
    status = 30


class FileResizeFailed(MappingError):
    status = 31


class MapFailed(MappingError):
    status = 32


class FlushFailed(MappingError):
    status = 33


class UnlinkFailed(MappingError):
    status = 34


# -- window -----------------------------------------------------------------

class WindowError(StorageWinError):
    exit_code = 4


class OutOfBounds(WindowError):
    status = 2


class NoEpoch(WindowError):
    status = 3


class OpenEpoch(WindowError):
    status = 4


class MisalignedElement(WindowError):
    status = 5


class UnknownWindow(WindowError):
    status = 6


class NotAttached(WindowError):
    status = 7


class Overlap(WindowError):
    status = 8


class CollectiveMismatch(WindowError):
    status = 9


class NotCoLocated(WindowError):
    status = 10


# -- fabric -----------------------------------------------------------------

class FabricError(StorageWinError):
    exit_code = 5


class Unsupported(FabricError):
    status = 1


class TransportFailed(FabricError):
    status = 40


class ConnectFailed(FabricError):
    status = 41


class RankCollision(FabricError):
    status = 42


class FrameError(FabricError):
    status = 43


class BadMagic(FrameError):
    pass


class BadVersion(FrameError):
    pass


class Truncated(FrameError):
    pass


# -- workloads --------------------------------------------------------------

class ConfigInvalid(StorageWinError):
    status = 50
    exit_code = 6


class TableFull(StorageWinError):
    status = 51
    exit_code = 7


class ShortFile(StorageWinError):
    status = 52
    exit_code = 8


class VerificationFailed(StorageWinError):
    exit_code = 9


def _all_subclasses(cls):
    for sub in cls.__subclasses__():
        yield sub
        yield from _all_subclasses(sub)


_BY_STATUS = {}
for _cls in _all_subclasses(StorageWinError):
    # first definition wins: subclasses of FrameError share its status
    _BY_STATUS.setdefault(_cls.status, _cls)


def error_for_status(status, message=""):
    """Rebuild the exception an error reply stands for."""
    cls = _BY_STATUS.get(status, StorageWinError)
    return cls(message or f"remote error (status {status})")
