"""Privacy-preserving federated learning over a simulated multi-party network.

Additive secret sharing over Z_{2^k}, Beaver-triple multiplication,
DCF-based masked comparison and fully secret-shared CNN inference, with a
deterministic network simulator and plaintext oracles for every protocol.
"""

from .ring_fixed import FixedPointConfig, RangeError, Ring, decode_fixed, encode_fixed
from .sharing import ShareVector, add_shares, reconstruct, share
from .simnet import LINK_PRESETS, LinkModel, Network, ProtocolAbort

__version__ = "0.1.0"

__all__ = [
    "FixedPointConfig", "RangeError", "Ring", "decode_fixed", "encode_fixed",
    "ShareVector", "add_shares", "reconstruct", "share",
    "LINK_PRESETS", "LinkModel", "Network", "ProtocolAbort",
]
