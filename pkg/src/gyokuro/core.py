"""Domain types, canonical encodings and cryptographic contracts.

Every role (TEE, database host, monitor, data source, client) speaks the
byte layouts defined here.  Signatures are ECDSA over P-256 with SHA-256;
signing is deterministic (RFC 6979) so identical inputs give identical
bytes, which the privacy and determinism checks rely on.
"""

from __future__ import annotations

import enum
import functools
import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec

GENESIS = bytes(32)
HASH_SIZE = 32
U64_MAX = 2**64 - 1

_ECDSA = ec.ECDSA(hashes.SHA256(), deterministic_signing=True)
_ECDSA_VERIFY = ec.ECDSA(hashes.SHA256())


class EncodingError(ValueError):
    """Raised for malformed canonical encodings (both directions)."""


class UnknownKeyError(LookupError):
    """A key id was looked up that the registry does not hold."""


class Tag(enum.IntEnum):
    POR = 0x01
    POP = 0x02
    CHECKPOINT = 0x03
    CHAIN_STEP = 0x04
    ITEM = 0x05
    REPORT = 0x06


# Field layouts per tag: "u64" fixed 8-byte big-endian, "h32" fixed 32 bytes,
# "bytes" 8-byte big-endian length prefix followed by the raw bytes.
_LAYOUTS: dict[Tag, tuple[str, ...]] = {
    Tag.POR: ("bytes", "u64", "bytes"),
    Tag.POP: ("u64",),
    Tag.CHECKPOINT: ("h32",),
    Tag.CHAIN_STEP: ("h32", "bytes"),
    Tag.ITEM: ("bytes",),
    Tag.REPORT: ("h32", "bytes"),
}


def u64(value: int) -> bytes:
    if not 0 <= value <= U64_MAX:
        raise EncodingError(f"counter out of u64 range: {value}")
    return struct.pack(">Q", value)


def len8(data: bytes) -> bytes:
    return struct.pack(">Q", len(data)) + data


def canonical_encode(kind: int, *fields: int | bytes) -> bytes:
    """Encode ``fields`` under domain-separation tag ``kind``.

    The output is one tag byte followed by each field, fixed-width or
    length-prefixed according to the tag's layout, so the map from
    ``(kind, fields)`` to bytes is injective.
    """
    try:
        tag = Tag(kind)
    except ValueError:
        raise EncodingError(f"unknown encoding tag {kind!r}") from None
    layout = _LAYOUTS[tag]
    if len(fields) != len(layout):
        raise EncodingError(
            f"tag {tag.name} takes {len(layout)} fields, got {len(fields)}"
        )
    out = [bytes((tag,))]
    for kind_, value in zip(layout, fields):
        if kind_ == "u64":
            if not isinstance(value, int) or isinstance(value, bool):
                raise EncodingError("u64 field must be an int")
            out.append(u64(value))
        elif kind_ == "h32":
            if not isinstance(value, (bytes, bytearray)) or len(value) != HASH_SIZE:
                raise EncodingError("h32 field must be exactly 32 bytes")
            out.append(bytes(value))
        else:
            if not isinstance(value, (bytes, bytearray)):
                raise EncodingError("variable-length field must be bytes")
            out.append(len8(bytes(value)))
    return b"".join(out)


class Reader:
    """Cursor over an encoded buffer; every read is bounds-checked."""

    __slots__ = ("_buf", "_pos")

    def __init__(self, data: bytes) -> None:
        self._buf = memoryview(data)
        self._pos = 0

    def fixed(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._buf):
            raise EncodingError("truncated input")
        out = bytes(self._buf[self._pos:end])
        self._pos = end
        return out

    def u8(self) -> int:
        return self.fixed(1)[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.fixed(8))[0]

    def blob(self) -> bytes:
        return self.fixed(self.u64())

    def remaining(self) -> int:
        return len(self._buf) - self._pos

    def done(self) -> None:
        if self._pos != len(self._buf):
            raise EncodingError(f"{len(self._buf) - self._pos} trailing bytes")


# ---------------------------------------------------------------------------
# Keys and signatures
# ---------------------------------------------------------------------------

PrivateKey = ec.EllipticCurvePrivateKey
PublicKey = ec.EllipticCurvePublicKey


def generate_key() -> PrivateKey:
    return ec.generate_private_key(ec.SECP256R1())


def public_bytes(key: PublicKey | PrivateKey) -> bytes:
    """X9.62 uncompressed point (65 bytes)."""
    if isinstance(key, ec.EllipticCurvePrivateKey):
        key = key.public_key()
    return key.public_bytes(
        serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint
    )


@functools.lru_cache(maxsize=4096)
def load_public(data: bytes) -> PublicKey:
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), data)
    except (ValueError, TypeError) as exc:
        raise EncodingError(f"malformed public key: {exc}") from None


def sign(key: PrivateKey, message: bytes) -> bytes:
    return key.sign(message, _ECDSA)


def verify(key: PublicKey | bytes, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is valid; malformed input yields False."""
    try:
        if isinstance(key, (bytes, bytearray)):
            key = load_public(bytes(key))
        key.verify(signature, message, _ECDSA_VERIFY)
    except (InvalidSignature, EncodingError, ValueError, TypeError):
        return False
    return True


def private_pem(key: PrivateKey) -> bytes:
    return key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )


def load_private_pem(data: bytes) -> PrivateKey:
    key = serialization.load_pem_private_key(data, password=None)
    if not isinstance(key, ec.EllipticCurvePrivateKey):
        raise EncodingError("expected an EC private key")
    return key


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class DataItem:
    payload: bytes
    source_sig: bytes
    source_key_id: str

    def signing_bytes(self) -> bytes:
        return item_preimage(self.payload)

    def encode(self) -> bytes:
        return b"".join(
            (len8(self.payload), len8(self.source_key_id.encode()), len8(self.source_sig))
        )

    @classmethod
    def read(cls, r: Reader) -> "DataItem":
        payload = r.blob()
        key_id = r.blob().decode()
        return cls(payload, r.blob(), key_id)

    @classmethod
    def decode(cls, data: bytes) -> "DataItem":
        r = Reader(data)
        item = cls.read(r)
        r.done()
        return item


def item_preimage(payload: bytes) -> bytes:
    return canonical_encode(Tag.ITEM, payload)


def sign_item(key: PrivateKey, key_id: str, payload: bytes) -> DataItem:
    if not payload:
        raise ValueError("payload must be at least one byte")
    return DataItem(payload, sign(key, item_preimage(payload)), key_id)


@dataclass(frozen=True, slots=True)
class AttestationReport:
    measurement: bytes
    tee_public_key: bytes
    authority_sig: bytes

    def signed_bytes(self) -> bytes:
        return canonical_encode(Tag.REPORT, self.measurement, self.tee_public_key)

    def to_bytes(self) -> bytes:
        return self.signed_bytes() + len8(self.authority_sig)

    @classmethod
    def read(cls, r: Reader) -> "AttestationReport":
        if r.u8() != Tag.REPORT:
            raise EncodingError("report does not start with tag 0x06")
        measurement = r.fixed(HASH_SIZE)
        pk = r.blob()
        return cls(measurement, pk, r.blob())

    @classmethod
    def from_bytes(cls, data: bytes) -> "AttestationReport":
        r = Reader(data)
        report = cls.read(r)
        r.done()
        return report


@dataclass(frozen=True, slots=True)
class ProofOfReception:
    tee_sig: bytes
    cnt_por: int
    report: AttestationReport

    def encode(self) -> bytes:
        return len8(self.tee_sig) + u64(self.cnt_por) + len8(self.report.to_bytes())

    @classmethod
    def read(cls, r: Reader) -> "ProofOfReception":
        sig = r.blob()
        cnt = r.u64()
        return cls(sig, cnt, AttestationReport.from_bytes(r.blob()))

    @classmethod
    def decode(cls, data: bytes) -> "ProofOfReception":
        r = Reader(data)
        por = cls.read(r)
        r.done()
        return por


@dataclass(frozen=True, slots=True)
class ProofOfProcessing:
    tee_sig: bytes
    cnt_pop: int

    def encode(self) -> bytes:
        return len8(self.tee_sig) + u64(self.cnt_pop)

    @classmethod
    def decode(cls, data: bytes) -> "ProofOfProcessing":
        r = Reader(data)
        sig = r.blob()
        pop = cls(sig, r.u64())
        r.done()
        return pop


@dataclass(frozen=True, slots=True)
class MonitorCheckpoint:
    hc_m: bytes
    monitor_sig: bytes
    monitor_key_id: str

    def encode(self) -> bytes:
        return self.hc_m + len8(self.monitor_key_id.encode()) + len8(self.monitor_sig)

    @classmethod
    def decode(cls, data: bytes) -> "MonitorCheckpoint":
        r = Reader(data)
        hc = r.fixed(HASH_SIZE)
        key_id = r.blob().decode()
        cp = cls(hc, r.blob(), key_id)
        r.done()
        return cp


@dataclass(frozen=True, slots=True)
class HashChainEntry:
    hc: bytes
    cnt: int


@dataclass
class KeyRegistry:
    """Trust anchors: APK, EM, and the registered source / monitor keys."""

    apk: PublicKey
    expected_measurement: bytes
    data_source_keys: dict[str, PublicKey] = field(default_factory=dict)
    monitor_keys: dict[str, PublicKey] = field(default_factory=dict)

    def source_key(self, key_id: str) -> PublicKey:
        try:
            return self.data_source_keys[key_id]
        except KeyError:
            raise UnknownKeyError(f"unregistered data source {key_id!r}") from None

    def monitor_key(self, key_id: str) -> PublicKey:
        try:
            return self.monitor_keys[key_id]
        except KeyError:
            raise UnknownKeyError(f"unregistered monitor {key_id!r}") from None


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def hash_chain_step(hc_prev: bytes, item: DataItem | bytes) -> bytes:
    """One accumulator step: H(0x04 || hc_prev || len8(payload) || payload)."""
    payload = item.payload if isinstance(item, DataItem) else item
    if len(hc_prev) != HASH_SIZE:
        raise EncodingError("hash-chain value must be 32 bytes")
    h = hashlib.sha256(b"\x04")
    h.update(hc_prev)
    h.update(struct.pack(">Q", len(payload)))
    h.update(payload)
    return h.digest()


def fold(hc: bytes, items: Iterable[DataItem | bytes]) -> bytes:
    for item in items:
        hc = hash_chain_step(hc, item)
    return hc


def por_preimage(payload: bytes, cnt_por: int, report: AttestationReport) -> bytes:
    return canonical_encode(Tag.POR, payload, cnt_por, report.to_bytes())


def pop_preimage(cnt_pop: int) -> bytes:
    return canonical_encode(Tag.POP, cnt_pop)


def checkpoint_preimage(hc_m: bytes) -> bytes:
    return canonical_encode(Tag.CHECKPOINT, hc_m)


def verify_por(por: ProofOfReception, payload: bytes) -> bool:
    """POR signature check under the TEE key carried in its own report."""
    return verify(
        por.report.tee_public_key,
        por_preimage(payload, por.cnt_por, por.report),
        por.tee_sig,
    )


def sign_checkpoint(key: PrivateKey, key_id: str, hc_m: bytes) -> MonitorCheckpoint:
    return MonitorCheckpoint(hc_m, sign(key, checkpoint_preimage(hc_m)), key_id)


def verify_checkpoint(cp: MonitorCheckpoint, key: PublicKey | bytes) -> bool:
    if len(cp.hc_m) != HASH_SIZE:
        return False
    return verify(key, checkpoint_preimage(cp.hc_m), cp.monitor_sig)


def issue_report(authority_key: PrivateKey, measurement: bytes, tee_public_key: bytes) -> AttestationReport:
    body = canonical_encode(Tag.REPORT, measurement, tee_public_key)
    return AttestationReport(measurement, tee_public_key, sign(authority_key, body))


def verify_report(report: AttestationReport, apk: PublicKey | bytes, expected_measurement: bytes) -> bool:
    if report.measurement != expected_measurement:
        return False
    try:
        body = report.signed_bytes()
    except EncodingError:
        return False
    return verify(apk, body, report.authority_sig)


class AttestationAuthority:
    """Mock attestation infrastructure: signs (measurement, pk_T) statements."""

    def __init__(self, key: PrivateKey | None = None) -> None:
        self._key = key or generate_key()

    @property
    def apk(self) -> PublicKey:
        return self._key.public_key()

    def issue(self, measurement: bytes, tee_public_key: bytes) -> AttestationReport:
        return issue_report(self._key, measurement, tee_public_key)

    def pem(self) -> bytes:
        return private_pem(self._key)


def measurement_of(sources: Sequence[bytes] | Mapping[str, bytes]) -> bytes:
    """Code-integrity measurement over a set of module sources."""
    h = hashlib.sha256(b"gyokuro-measurement")
    items = sorted(sources.items()) if isinstance(sources, Mapping) else enumerate(sources)
    for name, blob in items:
        h.update(len8(str(name).encode()))
        h.update(len8(blob))
    return h.digest()
