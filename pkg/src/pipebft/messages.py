"""Wire message types, canonical binary encoding, and batch digesting.

Every message encodes to one frame: a 4-byte big-endian length (of everything
after the prefix), a 1-byte type tag, then the body in fixed field order with
fixed-width integers and length-prefixed variable parts.  The signature is
always the trailing element, so the bytes a signature covers are exactly the
frame body up to the signature (``signed_portion`` below).  Decoders keep a
reference to that slice so verification never re-encodes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .config import SCHEME_DS_FAST, SCHEME_DS_SLOW, SCHEME_MAC, SCHEME_NOSIG
from .crypto import DIGEST_LEN, ED25519_SIG_LEN, MAC_LEN, NOSIG_SIGNATURE, Signature, hash_bytes

# Frame tags.
TAG_CLIENT_REQUEST = 1
TAG_PRE_PREPARE = 2
TAG_PREPARE = 3
TAG_COMMIT = 4
TAG_CHECKPOINT = 5
TAG_CLIENT_RESPONSE = 6
TAG_SPEC_RESPONSE = 7
TAG_COMMIT_CERT = 8
TAG_CERT_ACK = 9

OP_WRITE = 0

HEADER = struct.Struct(">IB")          # frame length, tag
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_OP = struct.Struct(">BIQ")            # kind, key, value
_REQ_HDR = struct.Struct(">IQH")       # client_id, request_seq, op count
_PREPARE_BODY = struct.Struct(">IQ32sH")   # view, seq, digest, sender
_CHECKPOINT_BODY = struct.Struct(">Q32sH")  # seq, chain digest, sender


class MalformedFrame(ValueError):
    """Frame is truncated, oversized, or fails structural parsing."""


class UnknownTag(ValueError):
    """Frame carries an unrecognized message type tag."""


@dataclass(slots=True)
class Operation:
    kind: int
    key: int
    value: int


@dataclass(slots=True, eq=False)
class ClientRequest:
    """One client transaction: a list of write operations plus filler payload.

    ``raw`` caches this request's canonical encoding (including signature) as
    produced by the encoder or seen on the wire; ``signed_portion`` is the
    prefix of ``raw`` the client signature covers.
    """

    client_id: int
    request_seq: int
    operations: list[Operation]
    payload: bytes
    signature: Signature
    raw: bytes = b""

    def __eq__(self, other):
        return (
            isinstance(other, ClientRequest)
            and self.client_id == other.client_id
            and self.request_seq == other.request_seq
            and self.operations == other.operations
            and self.payload == other.payload
            and self.signature == other.signature
        )


@dataclass(slots=True)
class RequestBatch:
    """An ordered run of client requests covering sequence numbers
    [first_seq, last_seq]."""

    first_seq: int
    last_seq: int
    requests: list[ClientRequest]
    raw: bytes = b""

    def __post_init__(self):
        if self.last_seq - self.first_seq + 1 != len(self.requests):
            raise ValueError("batch sequence range does not match request count")

    def __eq__(self, other):
        return (
            isinstance(other, RequestBatch)
            and self.first_seq == other.first_seq
            and self.last_seq == other.last_seq
            and self.requests == other.requests
        )


@dataclass(slots=True, eq=False)
class PrePrepare:
    view: int
    seq: int
    digest: bytes
    batch: RequestBatch
    signature: Signature
    signed_portion: bytes = b""

    def __eq__(self, other):
        return (
            isinstance(other, PrePrepare)
            and (self.view, self.seq, self.digest) == (other.view, other.seq, other.digest)
            and self.batch == other.batch
            and self.signature == other.signature
        )


@dataclass(slots=True)
class Prepare:
    view: int
    seq: int
    digest: bytes
    sender_id: int
    signature: Signature
    signed_portion: bytes = field(default=b"", compare=False)


@dataclass(slots=True)
class Commit:
    view: int
    seq: int
    digest: bytes
    sender_id: int
    signature: Signature
    signed_portion: bytes = field(default=b"", compare=False)


@dataclass(slots=True)
class CheckpointMsg:
    seq: int
    chain_digest: bytes
    sender_id: int
    signature: Signature
    signed_portion: bytes = field(default=b"", compare=False)


@dataclass(slots=True)
class ClientResponse:
    client_id: int
    request_seq: int
    replica_id: int
    results: list[int]
    signature: Signature
    signed_portion: bytes = field(default=b"", compare=False)


@dataclass(slots=True)
class SpecResponse:
    """Speculative execution evidence sent straight to the client."""

    view: int
    seq: int
    digest: bytes
    client_id: int
    request_seq: int
    replica_id: int
    results: list[int]
    result_digest: bytes
    signature: Signature
    signed_portion: bytes = field(default=b"", compare=False)


@dataclass(slots=True)
class CommitCertificate:
    """2f+1 matching speculative responses, broadcast by a client on the
    slow path."""

    client_id: int
    request_seq: int
    view: int
    seq: int
    digest: bytes
    results: list[int]
    result_digest: bytes
    responses: list[tuple[int, Signature]]


@dataclass(slots=True)
class CertAck:
    client_id: int
    request_seq: int
    seq: int
    replica_id: int
    signature: Signature
    signed_portion: bytes = field(default=b"", compare=False)


ConsensusMessage = (
    ClientRequest
    | PrePrepare
    | Prepare
    | Commit
    | CheckpointMsg
    | ClientResponse
    | SpecResponse
    | CommitCertificate
    | CertAck
)


# --- signature codec -------------------------------------------------------

def _encode_sig(sig: Signature) -> bytes:
    if sig.scheme == SCHEME_NOSIG:
        return b"\x00"
    if sig.scheme == SCHEME_MAC:
        entries = sig.data
        parts = [bytes([SCHEME_MAC]), _U16.pack(len(entries))]
        for receiver in sorted(entries):
            parts.append(_U16.pack(receiver))
            parts.append(entries[receiver])
        return b"".join(parts)
    if sig.scheme == SCHEME_DS_FAST:
        return bytes([SCHEME_DS_FAST]) + sig.data
    if sig.scheme == SCHEME_DS_SLOW:
        return bytes([SCHEME_DS_SLOW]) + _U16.pack(len(sig.data)) + sig.data
    raise ValueError(f"unknown scheme {sig.scheme}")


def _decode_sig(buf: bytes, off: int) -> tuple[Signature, int]:
    try:
        scheme = buf[off]
        off += 1
        if scheme == SCHEME_NOSIG:
            return NOSIG_SIGNATURE, off
        if scheme == SCHEME_MAC:
            (count,) = _U16.unpack_from(buf, off)
            off += 2
            entries = {}
            for _ in range(count):
                (receiver,) = _U16.unpack_from(buf, off)
                off += 2
                entries[receiver] = bytes(buf[off : off + MAC_LEN])
                if len(entries[receiver]) != MAC_LEN:
                    raise MalformedFrame("truncated MAC vector")
                off += MAC_LEN
            return Signature(SCHEME_MAC, entries), off
        if scheme == SCHEME_DS_FAST:
            data = bytes(buf[off : off + ED25519_SIG_LEN])
            if len(data) != ED25519_SIG_LEN:
                raise MalformedFrame("truncated ed25519 signature")
            return Signature(SCHEME_DS_FAST, data), off + ED25519_SIG_LEN
        if scheme == SCHEME_DS_SLOW:
            (n,) = _U16.unpack_from(buf, off)
            off += 2
            data = bytes(buf[off : off + n])
            if len(data) != n:
                raise MalformedFrame("truncated signature")
            return Signature(SCHEME_DS_SLOW, data), off + n
    except struct.error as exc:
        raise MalformedFrame(str(exc)) from None
    raise MalformedFrame(f"unknown signature scheme byte {scheme}")


# --- request / batch codec -------------------------------------------------

def encode_request_body(req: ClientRequest) -> bytes:
    """Canonical request encoding (no frame header); also cached in ``raw``."""
    parts = [
        _REQ_HDR.pack(req.client_id, req.request_seq, len(req.operations)),
    ]
    parts.extend(_OP.pack(op.kind, op.key, op.value) for op in req.operations)
    parts.append(_U32.pack(len(req.payload)))
    parts.append(req.payload)
    signed = b"".join(parts)
    raw = signed + _encode_sig(req.signature)
    req.raw = raw
    return raw


_REQ_TAG = bytes([TAG_CLIENT_REQUEST])


def finish_request(req: ClientRequest, sign_fn) -> ClientRequest:
    """Encode the signable part once, sign it, and cache the full encoding.

    ``sign_fn`` maps the signed bytes to a Signature (or None for nosig).
    Signatures are domain-separated by message tag: the tag byte is part of
    what gets signed even though the cached request body does not store it.
    """
    parts = [_REQ_HDR.pack(req.client_id, req.request_seq, len(req.operations))]
    parts.extend(_OP.pack(op.kind, op.key, op.value) for op in req.operations)
    parts.append(_U32.pack(len(req.payload)))
    parts.append(req.payload)
    fields = b"".join(parts)
    sig = sign_fn(_REQ_TAG + fields)
    req.signature = sig if sig is not None else NOSIG_SIGNATURE
    req.raw = fields + _encode_sig(req.signature)
    return req


def request_signed_portion(req: ClientRequest) -> bytes:
    """The bytes a client signature covers: tag plus everything before the
    signature."""
    if not req.raw:
        encode_request_body(req)
    return _REQ_TAG + req.raw[: _request_sig_offset(req.raw)]


def _decode_request(buf: bytes, off: int) -> tuple[ClientRequest, int]:
    start = off
    try:
        client_id, request_seq, op_count = _REQ_HDR.unpack_from(buf, off)
        off += _REQ_HDR.size
        ops = []
        for _ in range(op_count):
            kind, key, value = _OP.unpack_from(buf, off)
            ops.append(Operation(kind, key, value))
            off += _OP.size
        (payload_len,) = _U32.unpack_from(buf, off)
        off += 4
        payload = bytes(buf[off : off + payload_len])
        if len(payload) != payload_len:
            raise MalformedFrame("truncated payload")
        off += payload_len
    except struct.error as exc:
        raise MalformedFrame(str(exc)) from None
    sig, off = _decode_sig(buf, off)
    req = ClientRequest(client_id, request_seq, ops, payload, sig, raw=bytes(buf[start:off]))
    return req, off


def _request_sig_offset(raw: bytes) -> int:
    # length of the signed prefix inside a cached raw request encoding
    _, _, op_count = _REQ_HDR.unpack_from(raw, 0)
    off = _REQ_HDR.size + op_count * _OP.size
    (payload_len,) = _U32.unpack_from(raw, off)
    return off + 4 + payload_len


def encode_batch(batch: RequestBatch) -> bytes:
    parts = [_U64.pack(batch.first_seq), _U64.pack(batch.last_seq), _U16.pack(len(batch.requests))]
    for req in batch.requests:
        raw = req.raw or encode_request_body(req)
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
    raw = b"".join(parts)
    batch.raw = raw
    return raw


def decode_batch(buf: bytes) -> RequestBatch:
    try:
        (first_seq,) = _U64.unpack_from(buf, 0)
        (last_seq,) = _U64.unpack_from(buf, 8)
        (count,) = _U16.unpack_from(buf, 16)
    except struct.error as exc:
        raise MalformedFrame(str(exc)) from None
    off = 18
    requests = []
    for _ in range(count):
        try:
            (req_len,) = _U32.unpack_from(buf, off)
        except struct.error as exc:
            raise MalformedFrame(str(exc)) from None
        off += 4
        end = off + req_len
        if end > len(buf):
            raise MalformedFrame("truncated request in batch")
        req, used = _decode_request(buf, off)
        if used != end:
            raise MalformedFrame("request length prefix mismatch")
        requests.append(req)
        off = end
    if off != len(buf):
        raise MalformedFrame("trailing bytes after batch")
    try:
        batch = RequestBatch(first_seq, last_seq, requests, raw=bytes(buf))
    except ValueError as exc:
        raise MalformedFrame(str(exc)) from None
    return batch


def digest_of_batch(batch: RequestBatch | bytes) -> bytes:
    """Collision-resistant digest over the batch's canonical encoding."""
    raw = batch if isinstance(batch, (bytes, bytearray, memoryview)) else (batch.raw or encode_batch(batch))
    return hash_bytes(raw)


# --- per-type body codecs ----------------------------------------------------

def _results_block(results: list[int]) -> bytes:
    return _U16.pack(len(results)) + b"".join(_U64.pack(r) for r in results)


def _decode_results(buf: bytes, off: int) -> tuple[list[int], int]:
    try:
        (count,) = _U16.unpack_from(buf, off)
        off += 2
        results = []
        for _ in range(count):
            (value,) = _U64.unpack_from(buf, off)
            results.append(value)
            off += 8
    except struct.error as exc:
        raise MalformedFrame(str(exc)) from None
    return results, off


def _frame(tag: int, signed: bytes, sig: Signature) -> bytes:
    # signed portions embed the tag (see *_signed_portion), so strip it here:
    # the frame already carries the tag right after the length prefix
    body = signed[1:] + _encode_sig(sig)
    return _U32.pack(len(body) + 1) + bytes([tag]) + body


def encode_message(msg: ConsensusMessage) -> bytes:
    """Canonical, length-prefixed frame for any wire message."""
    t = type(msg)
    if t is ClientRequest:
        body = msg.raw or encode_request_body(msg)
        return _U32.pack(len(body) + 1) + bytes([TAG_CLIENT_REQUEST]) + body
    if t is PrePrepare:
        return _frame(TAG_PRE_PREPARE, preprepare_signed_portion(msg), msg.signature)
    if t is Prepare:
        return _frame(TAG_PREPARE, prepare_signed_portion(msg), msg.signature)
    if t is Commit:
        return _frame(TAG_COMMIT, prepare_signed_portion(msg), msg.signature)
    if t is CheckpointMsg:
        return _frame(TAG_CHECKPOINT, checkpoint_signed_portion(msg), msg.signature)
    if t is ClientResponse:
        return _frame(TAG_CLIENT_RESPONSE, client_response_signed_portion(msg), msg.signature)
    if t is SpecResponse:
        return _frame(TAG_SPEC_RESPONSE, spec_response_signed_portion(msg), msg.signature)
    if t is CommitCertificate:
        body_parts = [
            _U32.pack(msg.client_id),
            _U64.pack(msg.request_seq),
            _U32.pack(msg.view),
            _U64.pack(msg.seq),
            msg.digest,
            _results_block(msg.results),
            msg.result_digest,
            bytes([len(msg.responses)]),
        ]
        for replica_id, sig in msg.responses:
            body_parts.append(_U16.pack(replica_id))
            body_parts.append(_encode_sig(sig))
        body = b"".join(body_parts)
        return _U32.pack(len(body) + 1) + bytes([TAG_COMMIT_CERT]) + body
    if t is CertAck:
        return _frame(TAG_CERT_ACK, cert_ack_signed_portion(msg), msg.signature)
    raise TypeError(f"cannot encode {t.__name__}")


def preprepare_signed_portion(msg: PrePrepare) -> bytes:
    batch_raw = msg.batch.raw or encode_batch(msg.batch)
    signed = (
        bytes([TAG_PRE_PREPARE])
        + _U32.pack(msg.view)
        + _U64.pack(msg.seq)
        + msg.digest
        + _U32.pack(len(batch_raw))
        + batch_raw
    )
    msg.signed_portion = signed
    return signed


def prepare_signed_portion(msg: Prepare | Commit) -> bytes:
    tag = TAG_PREPARE if type(msg) is Prepare else TAG_COMMIT
    msg.signed_portion = bytes([tag]) + _PREPARE_BODY.pack(
        msg.view, msg.seq, msg.digest, msg.sender_id)
    return msg.signed_portion


def checkpoint_signed_portion(msg: CheckpointMsg) -> bytes:
    msg.signed_portion = bytes([TAG_CHECKPOINT]) + _CHECKPOINT_BODY.pack(
        msg.seq, msg.chain_digest, msg.sender_id)
    return msg.signed_portion


def client_response_signed_portion(msg: ClientResponse) -> bytes:
    msg.signed_portion = (
        bytes([TAG_CLIENT_RESPONSE])
        + _U32.pack(msg.client_id)
        + _U64.pack(msg.request_seq)
        + _U16.pack(msg.replica_id)
        + _results_block(msg.results)
    )
    return msg.signed_portion


def cert_ack_signed_portion(msg: CertAck) -> bytes:
    msg.signed_portion = (
        bytes([TAG_CERT_ACK])
        + _U32.pack(msg.client_id)
        + _U64.pack(msg.request_seq)
        + _U64.pack(msg.seq)
        + _U16.pack(msg.replica_id)
    )
    return msg.signed_portion


def results_digest(results: list[int]) -> bytes:
    """Digest over a request's per-operation results, for cheap comparison."""
    return hash_bytes(_results_block(results))


def spec_response_signed_portion(msg: SpecResponse) -> bytes:
    signed = (
        bytes([TAG_SPEC_RESPONSE])
        + _U32.pack(msg.view)
        + _U64.pack(msg.seq)
        + msg.digest
        + _U32.pack(msg.client_id)
        + _U64.pack(msg.request_seq)
        + _U16.pack(msg.replica_id)
        + _results_block(msg.results)
        + msg.result_digest
    )
    msg.signed_portion = signed
    return signed


def _take_digest(buf: bytes, off: int) -> tuple[bytes, int]:
    d = bytes(buf[off : off + DIGEST_LEN])
    if len(d) != DIGEST_LEN:
        raise MalformedFrame("truncated digest")
    return d, off + DIGEST_LEN


def decode_message(frame: bytes) -> ConsensusMessage:
    """Decode exactly one complete frame (including its length prefix)."""
    if len(frame) < 5:
        raise MalformedFrame(f"frame too short ({len(frame)} bytes)")
    (length,) = _U32.unpack_from(frame, 0)
    if length + 4 != len(frame):
        raise MalformedFrame("frame length prefix mismatch")
    tag = frame[4]
    body = frame[5:]
    return decode_body(tag, body)


def decode_body(tag: int, body: bytes) -> ConsensusMessage:
    try:
        return _DECODERS[tag](body)
    except KeyError:
        raise UnknownTag(f"unknown message tag {tag}") from None
    except (struct.error, IndexError) as exc:
        raise MalformedFrame(str(exc)) from None


def _expect_end(off: int, body: bytes):
    if off != len(body):
        raise MalformedFrame("trailing bytes after message")


def _dec_client_request(body: bytes) -> ClientRequest:
    req, off = _decode_request(body, 0)
    _expect_end(off, body)
    return req


def _dec_pre_prepare(body: bytes) -> PrePrepare:
    (view,) = _U32.unpack_from(body, 0)
    (seq,) = _U64.unpack_from(body, 4)
    digest, off = _take_digest(body, 12)
    (batch_len,) = _U32.unpack_from(body, off)
    off += 4
    batch_raw = body[off : off + batch_len]
    if len(batch_raw) != batch_len:
        raise MalformedFrame("truncated batch")
    off += batch_len
    sig, end = _decode_sig(body, off)
    _expect_end(end, body)
    batch = decode_batch(batch_raw)
    return PrePrepare(view, seq, digest, batch, sig,
                      signed_portion=bytes([TAG_PRE_PREPARE]) + bytes(body[:off]))


def _dec_prepare(body: bytes, cls=None) -> Prepare:
    cls = cls or Prepare
    view, seq, digest, sender = _PREPARE_BODY.unpack_from(body, 0)
    sig, end = _decode_sig(body, _PREPARE_BODY.size)
    _expect_end(end, body)
    tag = TAG_PREPARE if cls is Prepare else TAG_COMMIT
    return cls(view, seq, digest, sender, sig,
               signed_portion=bytes([tag]) + bytes(body[: _PREPARE_BODY.size]))


def _dec_checkpoint(body: bytes) -> CheckpointMsg:
    seq, chain_digest, sender = _CHECKPOINT_BODY.unpack_from(body, 0)
    sig, end = _decode_sig(body, _CHECKPOINT_BODY.size)
    _expect_end(end, body)
    return CheckpointMsg(seq, chain_digest, sender, sig,
                         signed_portion=bytes([TAG_CHECKPOINT]) + bytes(body[: _CHECKPOINT_BODY.size]))


def _dec_client_response(body: bytes) -> ClientResponse:
    (client_id,) = _U32.unpack_from(body, 0)
    (request_seq,) = _U64.unpack_from(body, 4)
    (replica_id,) = _U16.unpack_from(body, 12)
    results, off = _decode_results(body, 14)
    sig, end = _decode_sig(body, off)
    _expect_end(end, body)
    return ClientResponse(client_id, request_seq, replica_id, results, sig,
                          signed_portion=bytes([TAG_CLIENT_RESPONSE]) + bytes(body[:off]))


def _dec_spec_response(body: bytes) -> SpecResponse:
    (view,) = _U32.unpack_from(body, 0)
    (seq,) = _U64.unpack_from(body, 4)
    digest, off = _take_digest(body, 12)
    (client_id,) = _U32.unpack_from(body, off)
    (request_seq,) = _U64.unpack_from(body, off + 4)
    (replica_id,) = _U16.unpack_from(body, off + 12)
    results, off2 = _decode_results(body, off + 14)
    result_digest, off3 = _take_digest(body, off2)
    sig, end = _decode_sig(body, off3)
    _expect_end(end, body)
    return SpecResponse(
        view, seq, digest, client_id, request_seq, replica_id, results, result_digest,
        sig, signed_portion=bytes([TAG_SPEC_RESPONSE]) + bytes(body[:off3]),
    )


def _dec_commit_cert(body: bytes) -> CommitCertificate:
    (client_id,) = _U32.unpack_from(body, 0)
    (request_seq,) = _U64.unpack_from(body, 4)
    (view,) = _U32.unpack_from(body, 12)
    (seq,) = _U64.unpack_from(body, 16)
    digest, off = _take_digest(body, 24)
    results, off = _decode_results(body, off)
    result_digest, off = _take_digest(body, off)
    count = body[off]
    off += 1
    responses = []
    for _ in range(count):
        (replica_id,) = _U16.unpack_from(body, off)
        off += 2
        sig, off = _decode_sig(body, off)
        responses.append((replica_id, sig))
    _expect_end(off, body)
    return CommitCertificate(client_id, request_seq, view, seq, digest, results, result_digest, responses)


def _dec_cert_ack(body: bytes) -> CertAck:
    (client_id,) = _U32.unpack_from(body, 0)
    (request_seq,) = _U64.unpack_from(body, 4)
    (seq,) = _U64.unpack_from(body, 12)
    (replica_id,) = _U16.unpack_from(body, 20)
    sig, end = _decode_sig(body, 22)
    _expect_end(end, body)
    return CertAck(client_id, request_seq, seq, replica_id, sig,
                   signed_portion=bytes([TAG_CERT_ACK]) + bytes(body[:22]))


_DECODERS = {
    TAG_CLIENT_REQUEST: _dec_client_request,
    TAG_PRE_PREPARE: _dec_pre_prepare,
    TAG_PREPARE: _dec_prepare,
    TAG_COMMIT: lambda body: _dec_prepare(body, Commit),
    TAG_CHECKPOINT: _dec_checkpoint,
    TAG_CLIENT_RESPONSE: _dec_client_response,
    TAG_SPEC_RESPONSE: _dec_spec_response,
    TAG_COMMIT_CERT: _dec_commit_cert,
    TAG_CERT_ACK: _dec_cert_ack,
}

TAG_OF = {
    ClientRequest: TAG_CLIENT_REQUEST,
    PrePrepare: TAG_PRE_PREPARE,
    Prepare: TAG_PREPARE,
    Commit: TAG_COMMIT,
    CheckpointMsg: TAG_CHECKPOINT,
    ClientResponse: TAG_CLIENT_RESPONSE,
    SpecResponse: TAG_SPEC_RESPONSE,
    CommitCertificate: TAG_COMMIT_CERT,
    CertAck: TAG_CERT_ACK,
}
