"""Hashing and signatures.

Two kinds of signature scheme sit behind one registry interface:

* ``test``: ``sig = SHA-256(secret || msg)``.  Secrets never leave the
  registry, so only code holding a :class:`SigningKey` can produce a
  verifying signature.  This keeps the unforgeability assumption inside the
  simulator without paying for asymmetric crypto in property-test loops.
* ``ecdsa-p256`` and ``ed25519`` via the ``cryptography`` package.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict

SCHEMES = ("test", "ecdsa-p256", "ed25519")


class UnknownKey(KeyError):
    pass


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def digest_many(*parts: bytes) -> bytes:
    """Digest of length-prefixed parts, so concatenation is unambiguous."""
    h = hashlib.sha256()
    for part in parts:
        h.update(len(part).to_bytes(4, "big"))
        h.update(part)
    return h.digest()


@dataclass(frozen=True)
class PublicKey:
    scheme: str
    identity: str
    material: bytes


@dataclass(frozen=True)
class Signature:
    scheme: str
    value: bytes

    def hex(self) -> str:
        return self.value.hex()


@dataclass(eq=False)
class SigningKey:
    identity: str
    public: PublicKey
    _registry: "KeyRegistry" = field(repr=False)
    _secret: object = field(repr=False)

    def sign(self, msg: bytes) -> Signature:
        return self._registry._sign(self, msg)


class KeyRegistry:
    """PKI for a simulation run: maps identities to public keys."""

    def __init__(self, scheme: str = "test", seed: int = 0):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown signature scheme {scheme!r}")
        self.scheme = scheme
        self._seed = seed
        self._public: Dict[str, PublicKey] = {}
        self._test_secrets: Dict[bytes, bytes] = {}
        self._verifiers: Dict[PublicKey, object] = {}

    def generate(self, identity: str) -> SigningKey:
        if identity in self._public:
            raise ValueError(f"identity {identity!r} already registered")
        if self.scheme == "test":
            secret = digest(f"{self._seed}:{identity}".encode())
            material = digest(b"pub" + secret)
            self._test_secrets[material] = secret
            private: object = secret
        else:
            private, material = _generate_real(self.scheme)
        pub = PublicKey(self.scheme, identity, material)
        self._public[identity] = pub
        if self.scheme != "test":
            self._verifiers[pub] = _load_public(self.scheme, material)
        return SigningKey(identity, pub, self, private)

    def public_key(self, identity: str) -> PublicKey:
        try:
            return self._public[identity]
        except KeyError:
            raise UnknownKey(identity) from None

    def knows(self, identity: str) -> bool:
        return identity in self._public

    def verify(self, sig: Signature, pub: PublicKey, msg: bytes) -> bool:
        if sig.scheme != pub.scheme or self._public.get(pub.identity) != pub:
            return False
        if pub.scheme == "test":
            secret = self._test_secrets.get(pub.material)
            return secret is not None and digest(secret + msg) == sig.value
        return _verify_real(pub.scheme, self._verifiers[pub], sig.value, msg)

    def verify_from(self, sig: Signature, identity: str, msg: bytes) -> bool:
        pub = self._public.get(identity)
        return pub is not None and self.verify(sig, pub, msg)

    def _sign(self, key: SigningKey, msg: bytes) -> Signature:
        if self._public.get(key.identity) != key.public:
            raise UnknownKey(key.identity)
        if self.scheme == "test":
            return Signature("test", digest(key._secret + msg))
        return Signature(self.scheme, _sign_real(self.scheme, key._secret, msg))


def sign(key: SigningKey, msg: bytes) -> Signature:
    return key.sign(msg)


def verify(registry: KeyRegistry, sig: Signature, pub: PublicKey, msg: bytes) -> bool:
    return registry.verify(sig, pub, msg)


def _generate_real(scheme: str):
    from cryptography.hazmat.primitives import serialization
    from cryptography.hazmat.primitives.asymmetric import ec, ed25519

    if scheme == "ed25519":
        private = ed25519.Ed25519PrivateKey.generate()
        material = private.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
    else:
        private = ec.generate_private_key(ec.SECP256R1())
        material = private.public_key().public_bytes(
            serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint
        )
    return private, material


def _load_public(scheme: str, material: bytes):
    from cryptography.hazmat.primitives.asymmetric import ec, ed25519

    if scheme == "ed25519":
        return ed25519.Ed25519PublicKey.from_public_bytes(material)
    return ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), material)


def _sign_real(scheme: str, private, msg: bytes) -> bytes:
    from cryptography.hazmat.primitives import hashes
    from cryptography.hazmat.primitives.asymmetric import ec

    if scheme == "ed25519":
        return private.sign(msg)
    return private.sign(msg, ec.ECDSA(hashes.SHA256()))


def _verify_real(scheme: str, public, value: bytes, msg: bytes) -> bool:
    from cryptography.exceptions import InvalidSignature
    from cryptography.hazmat.primitives import hashes
    from cryptography.hazmat.primitives.asymmetric import ec

    try:
        if scheme == "ed25519":
            public.verify(value, msg)
        else:
            public.verify(value, msg, ec.ECDSA(hashes.SHA256()))
    except InvalidSignature:
        return False
    return True
