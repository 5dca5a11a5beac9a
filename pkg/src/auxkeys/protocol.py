"""Node state machines and wire messages for auxiliary-node key establishment.

Regular nodes hold one preloaded secret, their master key ``PRF(SK, id)``.
Auxiliary nodes hold the special key ``SK`` and act as on-demand key
distribution centres: they recompute master keys from identifiers, hand out
fresh pairwise keys and forget the master keys afterwards.

Case 1 (regular u <-> regular v, v talks to the auxiliary)::

    u -> v   : InitRequest(id_u, RN_u)
    v -> aux : AuxRequest(id_u, id_v, RN_u, RN_v, MAC_MKv(...))
    aux -> v : AuxReply(E_MKu(k ^ id_u ^ RN_u), E_MKv(k ^ id_v ^ RN_v))
    v -> u   : ForwardKey(E_MKu(k ^ id_u ^ RN_u))

Case 2 (regular u <-> auxiliary)::

    u -> aux : AuxDirectRequest(id_u)
    aux -> u : AuxDirectReply(E_MKu(k))

Case 2 carries no nonce, so an old AuxDirectReply can be replayed; this is
kept as described rather than patched.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Callable, ClassVar, Optional, Union

import numpy as np

from . import crypto
from .crypto import KLEN


class ProtocolError(Exception):
    pass


class DuplicateId(ProtocolError):
    pass


class SelfTarget(ProtocolError):
    pass


class AuthError(ProtocolError):
    """An auxiliary node rejected a request whose MAC did not verify."""


class NoPendingTransaction(ProtocolError):
    pass


class DecodeError(ProtocolError):
    pass


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InitRequest:
    TAG: ClassVar[int] = 1
    sender: int
    rn_u: bytes


@dataclass(frozen=True)
class AuxRequest:
    TAG: ClassVar[int] = 2
    id_u: int
    id_v: int
    rn_u: bytes
    rn_v: bytes
    tag: bytes

    def authenticated_bytes(self) -> bytes:
        return auth_payload(self.id_u, self.id_v, self.rn_u, self.rn_v)


@dataclass(frozen=True)
class AuxReply:
    TAG: ClassVar[int] = 3
    for_u: bytes
    for_v: bytes


@dataclass(frozen=True)
class ForwardKey:
    TAG: ClassVar[int] = 4
    for_u: bytes


@dataclass(frozen=True)
class AuxDirectRequest:
    TAG: ClassVar[int] = 5
    sender: int


@dataclass(frozen=True)
class AuxDirectReply:
    TAG: ClassVar[int] = 6
    enc_key: bytes


Message = Union[InitRequest, AuxRequest, AuxReply, ForwardKey, AuxDirectRequest, AuxDirectReply]

# field kinds: "id" and "fixed" are KLEN/TLEN wide, "var" is length-prefixed
_LAYOUT: dict[type, tuple[tuple[str, str], ...]] = {
    InitRequest: (("sender", "id"), ("rn_u", "fixed")),
    AuxRequest: (("id_u", "id"), ("id_v", "id"), ("rn_u", "fixed"), ("rn_v", "fixed"), ("tag", "fixed")),
    AuxReply: (("for_u", "var"), ("for_v", "var")),
    ForwardKey: (("for_u", "var"),),
    AuxDirectRequest: (("sender", "id"),),
    AuxDirectReply: (("enc_key", "var"),),
}
_BY_TAG = {cls.TAG: cls for cls in _LAYOUT}


def auth_payload(id_u: int, id_v: int, rn_u: bytes, rn_v: bytes) -> bytes:
    """The bytes covered by the responder's MAC: id_u || id_v || RN_u || RN_v."""
    return crypto.id_bytes(id_u) + crypto.id_bytes(id_v) + rn_u + rn_v


def encode(msg: Message) -> bytes:
    out = [bytes([msg.TAG])]
    for name, kind in _LAYOUT[type(msg)]:
        value = getattr(msg, name)
        if kind == "id":
            out.append(crypto.id_bytes(value))
        elif kind == "fixed":
            if len(value) != KLEN:
                raise ValueError(f"{name} must be {KLEN} bytes")
            out.append(value)
        else:
            if len(value) > 0xFFFF:
                raise ValueError(f"{name} too long to encode")
            out.append(struct.pack(">H", len(value)) + value)
    return b"".join(out)


def decode(raw: bytes) -> Message:
    if not raw:
        raise DecodeError("empty message")
    cls = _BY_TAG.get(raw[0])
    if cls is None:
        raise DecodeError(f"unknown message tag {raw[0]}")
    pos = 1
    values = {}
    for name, kind in _LAYOUT[cls]:
        if kind == "var":
            if pos + 2 > len(raw):
                raise DecodeError("truncated length prefix")
            (size,) = struct.unpack_from(">H", raw, pos)
            pos += 2
        else:
            size = KLEN
        chunk = raw[pos:pos + size]
        if len(chunk) != size:
            raise DecodeError(f"truncated field {name}")
        pos += size
        values[name] = crypto.id_from_bytes(chunk) if kind == "id" else chunk
    if pos != len(raw):
        raise DecodeError("trailing bytes")
    return cls(**values)


# ---------------------------------------------------------------------------
# Node state
# ---------------------------------------------------------------------------


@dataclass
class SetupServer:
    special_key: bytes
    issued_regular_ids: set[int] = field(default_factory=set)
    issued_aux_ids: set[int] = field(default_factory=set)

    @classmethod
    def create(cls, rng: np.random.Generator) -> "SetupServer":
        return cls(special_key=crypto.random_key(rng))

    def _claim(self, node_id: int, bucket: set[int]) -> None:
        if node_id < 0:
            raise ValueError("node ids are non-negative")
        if node_id in self.issued_regular_ids or node_id in self.issued_aux_ids:
            raise DuplicateId(f"node id {node_id} already issued")
        bucket.add(node_id)


@dataclass
class RegularNodeState:
    id: int
    master_key: bytes
    pairwise_keys: dict[int, bytes] = field(default_factory=dict)
    # initiator side: peer -> RN_u
    pending: dict[int, bytes] = field(default_factory=dict)
    # responder side: peer -> (RN_u, RN_v)
    responding: dict[int, tuple[bytes, bytes]] = field(default_factory=dict)

    @property
    def preloaded_secrets(self) -> int:
        return 1


@dataclass
class AuxiliaryNodeState:
    id: int
    special_key: bytes
    # Case 2 session keys, kept so aux-relayed traffic can be modelled
    session_keys: dict[int, bytes] = field(default_factory=dict)

    @property
    def preloaded_secrets(self) -> int:
        return 1

    def state_digest(self) -> str:
        h = hashlib.sha256()
        h.update(crypto.id_bytes(self.id))
        h.update(self.special_key)
        for peer in sorted(self.session_keys):
            h.update(crypto.id_bytes(peer))
            h.update(self.session_keys[peer])
        return h.hexdigest()


def provision_regular(server: SetupServer, node_id: int) -> RegularNodeState:
    server._claim(node_id, server.issued_regular_ids)
    return RegularNodeState(id=node_id, master_key=crypto.prf(server.special_key, crypto.id_bytes(node_id)))


def provision_auxiliary(server: SetupServer, node_id: int) -> AuxiliaryNodeState:
    server._claim(node_id, server.issued_aux_ids)
    return AuxiliaryNodeState(id=node_id, special_key=server.special_key)


# Nodes added after deployment are provisioned exactly like the initial ones.
add_regular_node = provision_regular
add_auxiliary_node = provision_auxiliary


# ---------------------------------------------------------------------------
# Case 1
# ---------------------------------------------------------------------------


def initiate(u: RegularNodeState, v_id: int, rng: np.random.Generator) -> InitRequest:
    if v_id == u.id:
        raise SelfTarget("a node cannot establish a key with itself")
    rn_u = crypto.random_nonce(rng)
    u.pending[v_id] = rn_u
    return InitRequest(sender=u.id, rn_u=rn_u)


def handle_init(v: RegularNodeState, msg: InitRequest, rng: np.random.Generator) -> AuxRequest:
    if msg.sender == v.id:
        raise SelfTarget("init request from self")
    rn_v = crypto.random_nonce(rng)
    v.responding[msg.sender] = (msg.rn_u, rn_v)
    tag = crypto.mac(v.master_key, auth_payload(msg.sender, v.id, msg.rn_u, rn_v))
    return AuxRequest(id_u=msg.sender, id_v=v.id, rn_u=msg.rn_u, rn_v=rn_v, tag=tag)


def aux_handle(
    aux: AuxiliaryNodeState,
    msg: AuxRequest,
    rng: np.random.Generator,
    key_sink: Optional[Callable[[bytes], None]] = None,
) -> AuxReply:
    """Authenticate the responder and issue a fresh pairwise key.

    Master keys and the drawn key live only in this frame; ``key_sink`` lets
    a test harness observe the key at draw time.
    """
    mk_v = crypto.prf(aux.special_key, crypto.id_bytes(msg.id_v))
    if not crypto.verify(msg.tag, mk_v, msg.authenticated_bytes()):
        raise AuthError(f"MAC from node {msg.id_v} did not verify")
    mk_u = crypto.prf(aux.special_key, crypto.id_bytes(msg.id_u))
    k_uv = crypto.random_key(rng)
    if key_sink is not None:
        key_sink(k_uv)
    return AuxReply(
        for_u=crypto.encrypt(mk_u, crypto.mask_key(k_uv, msg.id_u, msg.rn_u)),
        for_v=crypto.encrypt(mk_v, crypto.mask_key(k_uv, msg.id_v, msg.rn_v)),
    )


def responder_handle_reply(v: RegularNodeState, msg: AuxReply, peer: int) -> ForwardKey:
    try:
        _, rn_v = v.responding.pop(peer)
    except KeyError:
        raise NoPendingTransaction(f"node {v.id} has no open exchange with {peer}") from None
    v.pairwise_keys[peer] = crypto.unmask_key(crypto.decrypt(v.master_key, msg.for_v), v.id, rn_v)
    return ForwardKey(for_u=msg.for_u)


def initiator_handle_forward(u: RegularNodeState, msg: ForwardKey, peer: int) -> bytes:
    try:
        rn_u = u.pending.pop(peer)
    except KeyError:
        raise NoPendingTransaction(f"node {u.id} has no open exchange with {peer}") from None
    key = crypto.unmask_key(crypto.decrypt(u.master_key, msg.for_u), u.id, rn_u)
    u.pairwise_keys[peer] = key
    return key


# ---------------------------------------------------------------------------
# Case 2
# ---------------------------------------------------------------------------


def request_aux_key(u: RegularNodeState) -> AuxDirectRequest:
    return AuxDirectRequest(sender=u.id)


def aux_handle_direct(aux: AuxiliaryNodeState, msg: AuxDirectRequest, rng: np.random.Generator) -> AuxDirectReply:
    mk_u = crypto.prf(aux.special_key, crypto.id_bytes(msg.sender))
    key = crypto.random_key(rng)
    aux.session_keys[msg.sender] = key
    return AuxDirectReply(enc_key=crypto.encrypt(mk_u, key))


def handle_aux_direct_reply(u: RegularNodeState, msg: AuxDirectReply, aux_id: int) -> bytes:
    key = crypto.decrypt(u.master_key, msg.enc_key)
    u.pairwise_keys[aux_id] = key
    return key


def aux_direct(u: RegularNodeState, aux: AuxiliaryNodeState, rng: np.random.Generator) -> bytes:
    """Run both Case 2 messages; returns the key now stored on both sides."""
    reply = aux_handle_direct(aux, request_aux_key(u), rng)
    return handle_aux_direct_reply(u, reply, aux.id)


def handshake(
    u: RegularNodeState,
    v: RegularNodeState,
    aux: AuxiliaryNodeState,
    rng_u: np.random.Generator,
    rng_v: np.random.Generator,
    rng_aux: np.random.Generator,
    key_sink: Optional[Callable[[bytes], None]] = None,
) -> list[Message]:
    """Run a complete Case 1 exchange and return the four messages in order."""
    m1 = initiate(u, v.id, rng_u)
    m2 = handle_init(v, m1, rng_v)
    m3 = aux_handle(aux, m2, rng_aux, key_sink)
    m4 = responder_handle_reply(v, m3, u.id)
    initiator_handle_forward(u, m4, v.id)
    return [m1, m2, m3, m4]
