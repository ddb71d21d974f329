from .group import (Endpoint, LocalFabric, RankGroup, barrier, create_group,
                    create_local_groups, create_socket_group, run_local, run_ranks,
                    socket_groups_inprocess)
from .wire import (Frame, Opcode, Status, decode_frame, decode_reply, encode_frame,
                   encode_reply)

__all__ = [
    "Endpoint", "LocalFabric", "RankGroup", "barrier", "create_group",
    "create_local_groups", "create_socket_group", "run_local", "run_ranks",
    "socket_groups_inprocess", "Frame", "Opcode", "Status", "decode_frame",
    "decode_reply", "encode_frame", "encode_reply",
]
