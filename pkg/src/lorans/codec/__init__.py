"""Bit-exact LoRaWAN 1.0.x frame codec and crypto."""

from .crypto import (
    SessionKeys,
    aes_cmac,
    crypt_frm,
    decrypt_join_accept,
    derive_session_keys,
    encrypt_join_accept,
    mic_data,
    mic_join,
)
from .errors import (
    BadLength,
    CodecError,
    InvariantViolation,
    MalformedFOpts,
    TooShort,
    TruncatedPayload,
    UnknownCid,
    UnknownMType,
)
from .frames import (
    DataPayload,
    Direction,
    FCtrl,
    JoinAcceptPayload,
    JoinRequestPayload,
    MType,
    PhyPayload,
    parse_phy,
    serialize_body,
    serialize_phy,
)
from .mac import MacCommand, parse_mac_commands, serialize_mac_commands
