import hashlib

import pytest
from hypothesis import given, strategies as st

from poichain import codec
from poichain.crypto import (
    Certificate,
    CryptoError,
    KeyPair,
    VrfOutput,
    derive_seed,
    issue_certificate,
    sha256,
    sign,
    verify,
    verify_certificate,
    vrf_prove,
    vrf_verify,
)
from poichain.merkle import merkle_root

# RFC 8032 section 7.1, test 1 (empty message)
RFC8032_SECRET = bytes.fromhex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
RFC8032_PUBLIC = bytes.fromhex("d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a")
RFC8032_SIG = bytes.fromhex("e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e065224901555fb8821590a33bac"
                            "c61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b")


# -- codec -------------------------------------------------------------------

def test_encode_layout_is_length_prefixed_big_endian():
    assert codec.encode(b"ab", b"") == b"\x00\x00\x00\x02ab\x00\x00\x00\x00"


@given(st.lists(st.binary(max_size=64), max_size=8))
def test_encode_decode_identity(fields):
    data = codec.encode(*fields)
    assert codec.decode(data) == fields
    assert codec.encode(*codec.decode(data)) == data


@given(st.binary(max_size=64))
def test_decode_is_strict(data):
    try:
        fields = codec.decode(data)
    except codec.CodecError:
        return
    assert codec.encode(*fields) == data


def test_decode_rejects_trailing_and_wrong_count():
    with pytest.raises(codec.CodecError):
        codec.decode(codec.encode(b"x") + b"\x00")
    with pytest.raises(codec.CodecError):
        codec.decode(codec.encode(b"x", b"y"), 3)


def test_u64_and_optional():
    assert codec.u64(1) == bytes(7) + b"\x01"
    assert codec.read_u64(codec.u64(2 ** 64 - 1)) == 2 ** 64 - 1
    with pytest.raises(codec.CodecError):
        codec.u64(2 ** 64)
    with pytest.raises(codec.CodecError):
        codec.read_u64(b"\x01")
    assert codec.optional(None) == b""
    assert codec.optional(b"") == b"\x01"
    assert codec.read_optional(codec.optional(b"z")) == b"z"
    assert codec.read_optional(b"") is None
    with pytest.raises(codec.CodecError):
        codec.read_optional(b"\x02z")


def test_frames_report_byte_offset():
    data = codec.write_frames([b"abc", b"de"])
    assert codec.read_frames(data) == [b"abc", b"de"]
    with pytest.raises(codec.CodecError, match="offset 7"):
        codec.read_frames(data[:-1])
    with pytest.raises(codec.CodecError, match="offset 0"):
        codec.read_frames(b"\x00\x00")


# -- hashing / merkle --------------------------------------------------------

def test_sha256_vectors():
    assert sha256(b"").hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    assert sha256(b"abc").hex() == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def _merkle_oracle(items):
    h = lambda b: hashlib.sha256(b).digest()  # noqa: E731
    if not items:
        return h(b"")
    level = [h(i) for i in items]
    while len(level) > 1:
        if len(level) % 2:
            level = level + [level[-1]]
        level = [h(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def test_merkle_golden_and_edge_cases():
    h = lambda b: hashlib.sha256(b).digest()  # noqa: E731
    four = h(h(h(b"a") + h(b"b")) + h(h(b"c") + h(b"d")))
    assert merkle_root([b"a", b"b", b"c", b"d"]) == four
    assert four.hex() == "14ede5e8e97ad9372327728f5099b95604a39593cac3bd38a343ad76205213e7"
    assert merkle_root([b"a", b"b", b"c"]) == h(h(h(b"a") + h(b"b")) + h(h(b"c") + h(b"c")))
    assert merkle_root([]) == h(b"")
    assert merkle_root([b"a"]) == h(b"a")


@given(st.lists(st.binary(max_size=16), max_size=20))
def test_merkle_matches_oracle(items):
    assert merkle_root(items) == _merkle_oracle(items)


# -- signatures --------------------------------------------------------------

def test_ed25519_rfc8032_vector():
    kp = KeyPair.from_seed(RFC8032_SECRET)
    assert kp.public == RFC8032_PUBLIC
    assert sign(RFC8032_SECRET, b"") == RFC8032_SIG
    assert verify(RFC8032_PUBLIC, b"", RFC8032_SIG)
    assert not verify(RFC8032_PUBLIC, b"x", RFC8032_SIG)
    assert not verify(RFC8032_PUBLIC, b"", RFC8032_SIG[:-1])


def test_keypair_repr_hides_secret():
    kp = KeyPair.from_seed(bytes(32))
    assert bytes(32).hex() not in repr(kp)
    assert "secret" not in repr(kp)


def test_malformed_keys_raise():
    with pytest.raises(CryptoError):
        sign(b"short", b"m")
    with pytest.raises(CryptoError):
        verify(b"short", b"m", bytes(64))


def test_derive_seed_is_domain_separated():
    assert derive_seed("a", b"b", 3).hex() == "c8499f95e46dc70746ae7f50009a44d1227a4724ccea9f09f345e19cc54a921f"
    assert derive_seed("ab") != derive_seed("a", "b")


# -- certificates ------------------------------------------------------------

def test_certificate_chain():
    ca = KeyPair.from_seed(derive_seed("ca"))
    subject = KeyPair.from_seed(derive_seed("subject"))
    cert = issue_certificate(ca.secret, ca.label, subject.public)
    roots = {ca.label: ca.public}
    assert cert.subject_label == sha256(subject.public)
    assert verify_certificate(cert, roots)
    assert Certificate.decode(cert.encode()) == cert
    # unknown issuer, self-signed, tampered label, tampered key
    assert not verify_certificate(cert, {})
    self_signed = issue_certificate(subject.secret, subject.label, subject.public)
    assert not verify_certificate(self_signed, roots)
    forged_issuer = issue_certificate(subject.secret, ca.label, subject.public)
    assert not verify_certificate(forged_issuer, roots)
    other = KeyPair.from_seed(derive_seed("other"))
    swapped = Certificate(other.public, sha256(other.public), cert.issuer_id, cert.issuer_signature)
    assert not verify_certificate(swapped, roots)
    bad_label = Certificate(cert.subject_public_key, bytes(32), cert.issuer_id, cert.issuer_signature)
    assert not verify_certificate(bad_label, roots)


# -- VRF ---------------------------------------------------------------------

def test_vrf_unique_and_verifiable():
    kp = KeyPair.from_seed(derive_seed("vrf"))
    out = vrf_prove(kp.secret, b"prev")
    assert out == vrf_prove(kp.secret, b"prev")
    assert out.hash == sha256(out.proof)
    assert vrf_verify(kp.public, b"prev", out)
    assert not vrf_verify(kp.public, b"other", out)
    other = KeyPair.from_seed(derive_seed("vrf2"))
    assert not vrf_verify(other.public, b"prev", out)
    assert not vrf_verify(kp.public, b"prev", VrfOutput(sha256(b"x"), out.proof))
    assert VrfOutput.decode(out.encode()) == out


@given(st.binary(max_size=40))
def test_vrf_proof_never_looks_like_plain_signature(x):
    kp = KeyPair.from_seed(derive_seed("vrf"))
    assert not verify(kp.public, x, vrf_prove(kp.secret, x).proof)
