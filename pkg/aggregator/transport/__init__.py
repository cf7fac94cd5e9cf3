from aggregator.transport.frames import Message, MsgType, decode_frame, encode_frame  # noqa: F401
from aggregator.transport.network import Network  # noqa: F401
