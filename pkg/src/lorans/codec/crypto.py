"""AES-128 based primitives of LoRaWAN 1.0.x: MIC, FRMPayload cipher, OTAA keys."""

from __future__ import annotations

import struct
from dataclasses import dataclass

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.cmac import CMAC

from .errors import BadLength
from .frames import Direction

BLOCK = 16


@dataclass(frozen=True)
class SessionKeys:
    nwk_skey: bytes
    app_skey: bytes


def _ecb(key):
    return Cipher(algorithms.AES(key), modes.ECB())


def aes_encrypt(key: bytes, data: bytes) -> bytes:
    enc = _ecb(key).encryptor()
    return enc.update(data) + enc.finalize()


def aes_decrypt(key: bytes, data: bytes) -> bytes:
    dec = _ecb(key).decryptor()
    return dec.update(data) + dec.finalize()


def aes_cmac(key: bytes, data: bytes) -> bytes:
    c = CMAC(algorithms.AES(key))
    c.update(data)
    return c.finalize()


def _block(tag: int, direction, dev_addr: int, fcnt32: int, last: int) -> bytes:
    # tag | 4 x 0x00 | dir | DevAddr | FCntUp/Down | 0x00 | last
    return struct.pack("<B4xBIIxB", tag, int(direction), dev_addr, fcnt32 & 0xFFFFFFFF, last)


def mic_data(msg: bytes, key: bytes, direction: Direction, dev_addr: int, fcnt32: int) -> bytes:
    """MIC of a data frame; ``msg`` is MHDR | FHDR | FPort | FRMPayload."""
    b0 = _block(0x49, direction, dev_addr, fcnt32, len(msg) & 0xFF)
    return aes_cmac(key, b0 + msg)[:4]


def mic_join(msg: bytes, key: bytes) -> bytes:
    return aes_cmac(key, msg)[:4]


def crypt_frm(payload: bytes, key: bytes, dev_addr: int, fcnt32: int, direction: Direction) -> bytes:
    if not payload:
        return b""
    n = (len(payload) + BLOCK - 1) // BLOCK
    blocks = b"".join(_block(0x01, direction, dev_addr, fcnt32, i) for i in range(1, n + 1))
    stream = aes_encrypt(key, blocks)
    return bytes(a ^ b for a, b in zip(payload, stream))


def derive_session_keys(app_key: bytes, app_nonce: int, net_id: int, dev_nonce: int) -> SessionKeys:
    tail = app_nonce.to_bytes(3, "little") + net_id.to_bytes(3, "little") + struct.pack("<H", dev_nonce)
    pad = bytes(BLOCK - 1 - len(tail))
    nwk = aes_encrypt(app_key, b"\x01" + tail + pad)
    app = aes_encrypt(app_key, b"\x02" + tail + pad)
    return SessionKeys(nwk, app)


def encrypt_join_accept(plain: bytes, app_key: bytes) -> bytes:
    """Encrypt a join-accept body plus MIC (MHDR excluded).

    The network side applies the AES *decrypt* operation so that the device
    only needs the encrypt direction to recover the plaintext.
    """
    if len(plain) not in (16, 32):
        raise BadLength("join accept body+MIC must be 16 or 32 bytes, got %d" % len(plain))
    return aes_decrypt(app_key, plain)


def decrypt_join_accept(cipher: bytes, app_key: bytes) -> bytes:
    """Device-side inverse of :func:`encrypt_join_accept`."""
    if len(cipher) not in (16, 32):
        raise BadLength("join accept body+MIC must be 16 or 32 bytes, got %d" % len(cipher))
    return aes_encrypt(app_key, cipher)
