"""Pluggable message authentication: none, pairwise MAC, fast DS, slow DS.

The four schemes reproduce the signature-cost spectrum the benchmark sweeps:
MAC (HMAC-SHA256, pairwise keys) is cheapest, Ed25519 the fast digital
signature, RSA-2048 the slow one.  Key material is generated once per cluster
into a single key file; each process loads a view filtered to its own secrets,
so third parties genuinely lack pairwise MAC keys.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import struct
from dataclasses import dataclass
from pathlib import Path

from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.exceptions import InvalidSignature

from .config import SCHEME_DS_FAST, SCHEME_DS_SLOW, SCHEME_MAC, SCHEME_NOSIG

DIGEST_LEN = 32
MAC_LEN = 16
ED25519_SIG_LEN = 64

_RSA_PAD = padding.PKCS1v15()
_RSA_HASH = hashes.SHA256()


class MissingKey(KeyError):
    """No key material for the requested identity or pair."""


def hash_bytes(data: bytes) -> bytes:
    """32-byte SHA-256 digest."""
    return hashlib.sha256(data).digest()


@dataclass
class Signature:
    """A signature under one scheme.

    ``data`` is raw signature bytes for DS schemes and empty for nosig.  For a
    MAC broadcast it is a per-receiver vector {receiver_id: mac}.
    """

    __slots__ = ("scheme", "data")
    scheme: int
    data: bytes | dict[int, bytes]

    def mac_for(self, receiver: int) -> bytes | None:
        if isinstance(self.data, dict):
            return self.data.get(receiver)
        return self.data


NOSIG_SIGNATURE = Signature(SCHEME_NOSIG, b"")


def _pair_key_id(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a <= b else (b, a)


def generate_key_file(path: str | Path, identities: list[int], include_slow: bool = False) -> None:
    """Write the cluster key file: one record per identity plus the MAC matrix.

    RSA material is only generated when ``include_slow`` is set, since keygen
    is expensive and most runs never use the slow scheme.
    """
    lines = []
    for ident in identities:
        sk = Ed25519PrivateKey.generate()
        priv = sk.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )
        pub = sk.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        if include_slow:
            rk = rsa.generate_private_key(public_exponent=65537, key_size=2048)
            rpriv = rk.private_bytes(
                serialization.Encoding.DER,
                serialization.PrivateFormat.PKCS8,
                serialization.NoEncryption(),
            ).hex()
            rpub = rk.public_key().public_bytes(
                serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
            ).hex()
        else:
            rpriv = rpub = "-"
        lines.append(f"identity {ident} {priv.hex()} {pub.hex()} {rpriv} {rpub}")
    for i, a in enumerate(identities):
        for b in identities[i + 1 :]:
            lines.append(f"mackey {a} {b} {os.urandom(32).hex()}")
    Path(path).write_text("\n".join(lines) + "\n")


class KeyStore:
    """One process's view of the cluster key material.

    Loading filters the key file down to: every public key, the owner's
    private keys, and only the MAC keys for pairs the owner belongs to.
    """

    def __init__(self, my_id: int):
        self.my_id = my_id
        self._ed_priv: Ed25519PrivateKey | None = None
        self._ed_pub: dict[int, Ed25519PublicKey] = {}
        self._rsa_priv = None
        self._rsa_pub: dict[int, rsa.RSAPublicKey] = {}
        self._mac_keys: dict[tuple[int, int], bytes] = {}

    @classmethod
    def load(cls, path: str | Path, my_id: int) -> "KeyStore":
        ks = cls(my_id)
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            parts = line.split()
            if parts[0] == "identity":
                ident = int(parts[1])
                ks._ed_pub[ident] = Ed25519PublicKey.from_public_bytes(bytes.fromhex(parts[3]))
                if parts[5] != "-":
                    ks._rsa_pub[ident] = serialization.load_der_public_key(bytes.fromhex(parts[5]))
                if ident == my_id:
                    ks._ed_priv = Ed25519PrivateKey.from_private_bytes(bytes.fromhex(parts[2]))
                    if parts[4] != "-":
                        ks._rsa_priv = serialization.load_der_private_key(
                            bytes.fromhex(parts[4]), password=None
                        )
            elif parts[0] == "mackey":
                a, b = int(parts[1]), int(parts[2])
                if my_id in (a, b):
                    ks._mac_keys[(a, b)] = bytes.fromhex(parts[3])
            else:
                raise ValueError(f"bad key file line: {line[:40]!r}")
        return ks

    def _mac_key(self, a: int, b: int) -> bytes:
        try:
            return self._mac_keys[_pair_key_id(a, b)]
        except KeyError:
            raise MissingKey(f"no MAC key for pair ({a}, {b}) at identity {self.my_id}") from None

    def _mac(self, a: int, b: int, data: bytes) -> bytes:
        return hmac.digest(self._mac_key(a, b), data, "sha256")[:MAC_LEN]

    def sign(self, sender: int, receivers: int | list[int] | None, data: bytes, scheme: int) -> Signature:
        """Sign ``data`` as ``sender``.

        ``receivers`` matters only for MAC: a list produces a per-receiver MAC
        vector for broadcast, a single id one pairwise MAC.
        """
        if scheme == SCHEME_NOSIG:
            return NOSIG_SIGNATURE
        if sender != self.my_id:
            raise MissingKey(f"identity {self.my_id} cannot sign as {sender}")
        if scheme == SCHEME_MAC:
            if receivers is None:
                raise MissingKey("MAC signing needs explicit receivers")
            if isinstance(receivers, int):
                return Signature(SCHEME_MAC, {receivers: self._mac(sender, receivers, data)})
            return Signature(
                SCHEME_MAC, {r: self._mac(sender, r, data) for r in receivers if r != sender}
            )
        if scheme == SCHEME_DS_FAST:
            if self._ed_priv is None:
                raise MissingKey(f"no ed25519 private key for {sender}")
            return Signature(SCHEME_DS_FAST, self._ed_priv.sign(data))
        if scheme == SCHEME_DS_SLOW:
            if self._rsa_priv is None:
                raise MissingKey(f"no RSA private key for {sender}")
            return Signature(SCHEME_DS_SLOW, self._rsa_priv.sign(data, _RSA_PAD, _RSA_HASH))
        raise ValueError(f"unknown scheme {scheme}")

    def verify(self, sender: int, receiver: int, data: bytes, sig: Signature) -> bool:
        """True iff ``sig`` was produced by ``sender`` over ``data``."""
        if sig.scheme == SCHEME_NOSIG:
            return True
        if sig.scheme == SCHEME_MAC:
            mac = sig.mac_for(receiver)
            if not isinstance(mac, bytes) or not mac:
                return False
            return hmac.compare_digest(mac, self._mac(sender, receiver, data))
        if sig.scheme == SCHEME_DS_FAST:
            try:
                pub = self._ed_pub[sender]
            except KeyError:
                raise MissingKey(f"no ed25519 public key for {sender}") from None
            try:
                pub.verify(sig.data, data)
                return True
            except InvalidSignature:
                return False
        if sig.scheme == SCHEME_DS_SLOW:
            try:
                pub = self._rsa_pub[sender]
            except KeyError:
                raise MissingKey(f"no RSA public key for {sender}") from None
            try:
                pub.verify(sig.data, data, _RSA_PAD, _RSA_HASH)
                return True
            except InvalidSignature:
                return False
        raise ValueError(f"unknown scheme {sig.scheme}")


def identity_digest(identity: int) -> bytes:
    """Digest of a replica identity, used to seed the genesis block."""
    return hash_bytes(struct.pack(">I", identity))
