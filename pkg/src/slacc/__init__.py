"""Split learning with entropy-driven, channel-adaptive compression of smashed data."""
from .acii import EntropyState, ImportanceVector, score_channels
from .cgc import QuantizedSmashed, compress, decompress
from .codec import decode, encode
from .core import Direction, FormatError, SmashedData
from .harness import Config, train

__all__ = [
    "Config",
    "Direction",
    "EntropyState",
    "FormatError",
    "ImportanceVector",
    "QuantizedSmashed",
    "SmashedData",
    "compress",
    "decode",
    "decompress",
    "encode",
    "score_channels",
    "train",
]
__version__ = "0.1.0"
