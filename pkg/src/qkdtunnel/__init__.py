"""Quantum-secured transport on a desk: simulated BB84 link, ETSI-014-style KMEs,
PSK tunnel proxies and one-time-pad transport."""

from .bb84 import ChannelModel, SessionParams, run_session
from .keys import QkdKey
from .key_manager import KeyManager, PskIdentity
from .kme import KeyManagementEntity

__all__ = [
    "ChannelModel",
    "KeyManagementEntity",
    "KeyManager",
    "PskIdentity",
    "QkdKey",
    "SessionParams",
    "run_session",
]
__version__ = "0.1.0"
