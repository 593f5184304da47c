import hashlib

import pytest

from mirbft.crypto import KeyRegistry, Signature, UnknownKey, digest, digest_many

# Published SHA-256 test vectors.
EMPTY = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
ABC = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_digest_vectors():
    assert digest(b"").hex() == EMPTY
    assert digest(b"abc").hex() == ABC
    assert digest(b"a") != digest(b"b")


def test_digest_many_is_unambiguous():
    assert digest_many(b"ab", b"c") != digest_many(b"a", b"bc")
    assert digest_many(b"x") == hashlib.sha256(b"\x00\x00\x00\x01x").digest()


@pytest.mark.parametrize("scheme", ["test", "ecdsa-p256", "ed25519"])
def test_sign_verify(scheme):
    reg = KeyRegistry(scheme, seed=1)
    alice = reg.generate("alice")
    reg.generate("bob")
    sig = alice.sign(b"hello")
    assert reg.verify_from(sig, "alice", b"hello")
    assert not reg.verify_from(sig, "alice", b"hellO")
    assert not reg.verify_from(sig, "bob", b"hello")


def test_unregistered_identity():
    reg = KeyRegistry("test")
    sig = reg.generate("alice").sign(b"m")
    assert not reg.verify_from(sig, "mallory", b"m")
    with pytest.raises(UnknownKey):
        reg.public_key("mallory")


def test_forged_signature_fails():
    reg = KeyRegistry("test", seed=3)
    reg.generate("alice")
    guesses = [Signature("test", digest(b"m")), Signature("test", digest(b"alice" + b"m")), Signature("test", b"")]
    assert not any(reg.verify_from(s, "alice", b"m") for s in guesses)


def test_keys_from_another_registry_do_not_verify():
    a, b = KeyRegistry("test", seed=1), KeyRegistry("test", seed=2)
    ka = a.generate("alice")
    b.generate("alice")
    assert not b.verify_from(ka.sign(b"m"), "alice", b"m")


def test_identity_registered_once():
    reg = KeyRegistry("test")
    reg.generate("x")
    with pytest.raises(ValueError):
        reg.generate("x")


def test_unknown_scheme():
    with pytest.raises(ValueError):
        KeyRegistry("rsa")


def test_scheme_mismatch():
    reg = KeyRegistry("test")
    reg.generate("alice")
    other = KeyRegistry("ed25519").generate("alice").sign(b"m")
    assert not reg.verify_from(other, "alice", b"m")
