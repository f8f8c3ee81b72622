"""Bit-exact wire formats exchanged between the donee and donor engines.

Every message is either a 64-byte command-sized block or a 4160-byte page
packet (one command word followed by 64 page words). All multi-byte integers
are little-endian at fixed offsets; bytes not covered by a field must be zero.

Command block layout (64 bytes)::

    offset  size  field
    0       1     opcode
    1       1     src_mid
    2       1     dst_mid
    3       1     tier
    4       1     target_tier
    5       3     zero padding
    8       8     remote_addr      (u64 LE)
    16      8     request_token    (u64 LE)
    24      8     page_token       (u64 LE)
    32      32    zero padding

Completion block layout (64 bytes)::

    offset  size  field
    0       1     status
    1       1     tier
    2       6     zero padding
    8       8     remote_addr      (u64 LE)
    16      8     request_token    (u64 LE)
    24      40    zero padding

Page packets (store requests and load responses) are a command block followed
by exactly 4096 bytes of page data. Decoding validates padding, opcode/tier/
status ranges, and page alignment, so no two distinct wire blocks decode to
the same message. The full ABI, including framing tags used by the transport,
is documented in docs/protocol.md.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

PAGE_SIZE = 4096
COMMAND_SIZE = 64
PACKET_SIZE = COMMAND_SIZE + PAGE_SIZE  # 65 x 64-byte words


class Opcode(IntEnum):
    STORE = 0
    LOAD = 1
    INVALIDATE_PAGE = 2
    INVALIDATE_AREA = 3
    STORE_RESPONSE = 4  # reserved; completions carry store results instead
    LOAD_RESPONSE = 5


class Tier(IntEnum):
    DONEE_HBM = 0
    DONOR_HBM = 1
    DONOR_DRAM = 2
    LOCAL_SWAP = 3  # donee-internal last resort; invalid on the wire


class Status(IntEnum):
    OK = 0
    EXHAUSTED = 1
    PERMISSION_DENIED = 2
    INVALID = 3


#: Tier values that may legally appear in a wire block.
WIRE_TIERS = frozenset((Tier.DONEE_HBM, Tier.DONOR_HBM, Tier.DONOR_DRAM))

#: Tiers hosted by the donor engine.
DONOR_TIERS = frozenset((Tier.DONOR_HBM, Tier.DONOR_DRAM))

#: Opcodes whose remote_addr must be page-aligned.
_ALIGNED_OPCODES = frozenset((Opcode.LOAD, Opcode.INVALIDATE_PAGE))


class WireError(Exception):
    """Base class for encode/decode failures."""


class UnknownOpcode(WireError):
    pass


class UnknownTier(WireError):
    pass


class UnknownStatus(WireError):
    pass


class BadAlignment(WireError):
    pass


class BadLength(WireError):
    pass


class NonzeroPadding(WireError):
    pass


@dataclass(slots=True)
class Command:
    opcode: Opcode
    src_mid: int = 0
    dst_mid: int = 0
    tier: Tier = Tier.DONEE_HBM
    target_tier: Tier = Tier.DONEE_HBM
    remote_addr: int = 0
    request_token: int = 0
    page_token: int = 0


@dataclass(slots=True)
class StorePacket:
    header: Command
    page: bytes


@dataclass(slots=True)
class LoadResponsePacket:
    header: Command
    page: bytes


@dataclass(slots=True)
class Completion:
    status: Status
    tier: Tier = Tier.DONEE_HBM
    remote_addr: int = 0
    request_token: int = 0


_COMMAND = struct.Struct("<BBBBB3xQQQ32x")
_COMPLETION = struct.Struct("<BB6xQQ40x")

assert _COMMAND.size == COMMAND_SIZE
assert _COMPLETION.size == COMMAND_SIZE


def _check_wire_tier(value: int) -> Tier:
    tier = Tier(value) if value in Tier._value2member_map_ else None
    if tier is None or tier not in WIRE_TIERS:
        raise UnknownTier(f"tier byte {value:#04x} is not valid on the wire")
    return tier


def encode_command(cmd: Command) -> bytes:
    """Serialize a command into its 64-byte block."""
    if cmd.tier not in WIRE_TIERS or cmd.target_tier not in WIRE_TIERS:
        raise ValueError("LOCAL_SWAP never appears on the wire")
    return _COMMAND.pack(
        cmd.opcode,
        cmd.src_mid,
        cmd.dst_mid,
        cmd.tier,
        cmd.target_tier,
        cmd.remote_addr,
        cmd.request_token,
        cmd.page_token,
    )


def decode_command(block: bytes) -> Command:
    """Parse a 64-byte block; exact inverse of encode_command on its image."""
    if len(block) != COMMAND_SIZE:
        raise BadLength(f"command block must be 64 bytes, got {len(block)}")
    op_byte, src_mid, dst_mid, tier_byte, target_byte, remote_addr, request_token, page_token = (
        _COMMAND.unpack(block)
    )
    if op_byte not in Opcode._value2member_map_:
        raise UnknownOpcode(f"opcode byte {op_byte:#04x}")
    if block[5:8] != b"\x00\x00\x00" or block[32:] != bytes(32):
        raise NonzeroPadding("command padding bytes must be zero")
    opcode = Opcode(op_byte)
    tier = _check_wire_tier(tier_byte)
    target_tier = _check_wire_tier(target_byte)
    if opcode in _ALIGNED_OPCODES and remote_addr % PAGE_SIZE:
        raise BadAlignment(
            f"{opcode.name} remote_addr {remote_addr:#x} is not page-aligned"
        )
    return Command(
        opcode=opcode,
        src_mid=src_mid,
        dst_mid=dst_mid,
        tier=tier,
        target_tier=target_tier,
        remote_addr=remote_addr,
        request_token=request_token,
        page_token=page_token,
    )


def _encode_packet(header: Command, page: bytes) -> bytes:
    if len(page) != PAGE_SIZE:
        raise BadLength(f"page must be {PAGE_SIZE} bytes, got {len(page)}")
    return encode_command(header) + page


def encode_store_packet(pkt: StorePacket) -> bytes:
    """Serialize a store request: command block plus 4096 page bytes."""
    return _encode_packet(pkt.header, pkt.page)


def decode_store_packet(block: bytes) -> StorePacket:
    if len(block) != PACKET_SIZE:
        raise BadLength(f"store packet must be {PACKET_SIZE} bytes, got {len(block)}")
    return StorePacket(decode_command(block[:COMMAND_SIZE]), bytes(block[COMMAND_SIZE:]))


def encode_load_response(pkt: LoadResponsePacket) -> bytes:
    """Serialize a load response: metadata word plus 64 page words."""
    return _encode_packet(pkt.header, pkt.page)


def decode_load_response(block: bytes) -> LoadResponsePacket:
    if len(block) != PACKET_SIZE:
        raise BadLength(f"load response must be {PACKET_SIZE} bytes, got {len(block)}")
    return LoadResponsePacket(decode_command(block[:COMMAND_SIZE]), bytes(block[COMMAND_SIZE:]))


def encode_completion(c: Completion) -> bytes:
    """Serialize a completion into its 64-byte block."""
    if c.tier not in WIRE_TIERS:
        raise ValueError("LOCAL_SWAP never appears on the wire")
    return _COMPLETION.pack(c.status, c.tier, c.remote_addr, c.request_token)


def decode_completion(block: bytes) -> Completion:
    if len(block) != COMMAND_SIZE:
        raise BadLength(f"completion block must be 64 bytes, got {len(block)}")
    status_byte, tier_byte, remote_addr, request_token = _COMPLETION.unpack(block)
    if status_byte not in Status._value2member_map_:
        raise UnknownStatus(f"status byte {status_byte:#04x}")
    if block[2:8] != bytes(6) or block[24:] != bytes(40):
        raise NonzeroPadding("completion padding bytes must be zero")
    status = Status(status_byte)
    tier = _check_wire_tier(tier_byte)
    if status is Status.OK and remote_addr % PAGE_SIZE:
        raise BadAlignment(f"OK completion remote_addr {remote_addr:#x} is not page-aligned")
    return Completion(status=status, tier=tier, remote_addr=remote_addr, request_token=request_token)
