"""Donor-side engine: page allocation, ownership enforcement, responses.

The donor owns two tiers (HBM and DRAM), each backed by a PageAllocator and
a flat byte store. Incoming requests are split by opcode:

* Store: allocate a uniformly random free page in the requested tier (owner
  = requesting machine), spilling to the other donor tier when the first is
  exhausted, write the page, and answer with a completion naming the actual
  tier and address.
* Load: look up the page's owner and serve the bytes only to that machine;
  anyone else gets PermissionDenied and a free or out-of-range address gets
  Invalid. Loading never deallocates.
* InvalidatePage / InvalidateArea: deallocate (page, or everything owned by
  the sender) with no response on the wire; every outcome is tallied in
  audit counters instead.

All handlers execute one at a time against the engine state, so per-page
operations are linearizable no matter how many connections feed the engine.
The donor never sees a page key; everything it stores is ciphertext to it.
"""

from __future__ import annotations

import logging
import random
import struct
import threading
from dataclasses import dataclass, fields

from . import allocator as alloc_mod
from . import transport, wire
from .allocator import PageAllocator
from .wire import Command, Completion, LoadResponsePacket, Opcode, Status, Tier

log = logging.getLogger("farswap.donor")

DEFAULT_HBM_BASE = 0x1_0000_0000
DEFAULT_DRAM_BASE = 0x8_0000_0000


@dataclass(frozen=True)
class DonorConfig:
    my_mid: int
    hbm_capacity_pages: int
    dram_capacity_pages: int
    hbm_base_addr: int = DEFAULT_HBM_BASE
    dram_base_addr: int = DEFAULT_DRAM_BASE
    hbm_metadata_reserve_pages: int = 0
    # Pages pre-allocated at startup to another machine id, shrinking the
    # capacity visible to donees. Models a donor already serving other nodes.
    preload_hbm_pages: int = 0
    preload_dram_pages: int = 0
    preload_mid: int = 0

    def __post_init__(self):
        if not 1 <= self.my_mid <= alloc_mod.MAX_MID:
            raise ValueError(f"my_mid must be in 1..{alloc_mod.MAX_MID}")
        if self.hbm_capacity_pages < 0 or self.dram_capacity_pages < 0:
            raise ValueError("tier capacities must be >= 0")
        if self.hbm_metadata_reserve_pages > self.hbm_capacity_pages:
            raise ValueError("metadata reserve exceeds HBM capacity")
        if (self.preload_hbm_pages or self.preload_dram_pages) and not (
            1 <= self.preload_mid <= alloc_mod.MAX_MID
        ):
            raise ValueError("preload requires a valid preload_mid")


@dataclass
class DonorCounters:
    served_stores: int = 0
    served_loads: int = 0
    denied_loads: int = 0
    invalid_loads: int = 0
    invalidations: int = 0
    denied_invalidations: int = 0
    spurious_invalidations: int = 0
    area_invalidations: int = 0
    exhausted_stores: int = 0
    malformed_frames: int = 0
    mid_mismatch_frames: int = 0
    unexpected_frames: int = 0

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class _TierState:
    __slots__ = ("alloc", "pages")

    def __init__(self, alloc: PageAllocator, pages: bytearray):
        self.alloc = alloc
        self.pages = pages


_SNAPSHOT_MAGIC = b"FSDS"
_SNAPSHOT_VERSION = 1
_SNAP_HEADER = struct.Struct("<4sHB9x")
_SNAP_TIER = struct.Struct("<QQQ")


class DonorEngine:
    """Serial state machine over the donor's two tiers."""

    def __init__(self, config: DonorConfig, rng: random.Random | None = None):
        self.config = config
        self._rng = rng if rng is not None else random.Random()
        self._lock = threading.RLock()
        self.counters = DonorCounters()
        self._tiers: dict[Tier, _TierState] = {}
        if config.hbm_capacity_pages:
            hbm = PageAllocator(config.hbm_capacity_pages, config.hbm_base_addr)
            hbm.reserve_block(config.hbm_metadata_reserve_pages)
            self._tiers[Tier.DONOR_HBM] = _TierState(
                hbm, bytearray(config.hbm_capacity_pages * wire.PAGE_SIZE)
            )
        if config.dram_capacity_pages:
            dram = PageAllocator(config.dram_capacity_pages, config.dram_base_addr)
            self._tiers[Tier.DONOR_DRAM] = _TierState(
                dram, bytearray(config.dram_capacity_pages * wire.PAGE_SIZE)
            )
        self._preload()

    def _preload(self) -> None:
        for tier, count in (
            (Tier.DONOR_HBM, self.config.preload_hbm_pages),
            (Tier.DONOR_DRAM, self.config.preload_dram_pages),
        ):
            if not count:
                continue
            state = self._tiers.get(tier)
            if state is None or state.alloc.free_count < count:
                raise ValueError(f"cannot preload {count} pages in {tier.name}")
            for _ in range(count):
                state.alloc.alloc_random(self.config.preload_mid, self._rng)

    # -- handlers -----------------------------------------------------------

    def handle_store(self, src_mid: int, target_tier: Tier, page: bytes) -> Completion:
        """Place a page for src_mid, spilling to the other donor tier if needed."""
        if target_tier not in wire.DONOR_TIERS:
            raise ValueError(f"store target must be a donor tier, got {target_tier!r}")
        if len(page) != wire.PAGE_SIZE:
            raise ValueError(f"page must be {wire.PAGE_SIZE} bytes")
        other = Tier.DONOR_DRAM if target_tier is Tier.DONOR_HBM else Tier.DONOR_HBM
        with self._lock:
            for tier in (target_tier, other):
                state = self._tiers.get(tier)
                if state is None:
                    continue
                try:
                    addr = state.alloc.alloc_random(src_mid, self._rng)
                except alloc_mod.Exhausted:
                    continue
                rel = addr - state.alloc.base_addr
                state.pages[rel : rel + wire.PAGE_SIZE] = page
                self.counters.served_stores += 1
                return Completion(Status.OK, tier=tier, remote_addr=addr)
            self.counters.exhausted_stores += 1
            return Completion(Status.EXHAUSTED, tier=target_tier)

    def handle_load(self, src_mid: int, tier: Tier, remote_addr: int) -> tuple[Completion, bytes | None]:
        """Serve a page back iff src_mid owns it; the page stays allocated."""
        if tier not in wire.DONOR_TIERS:
            raise ValueError(f"load tier must be a donor tier, got {tier!r}")
        with self._lock:
            state = self._tiers.get(tier)
            if state is None:
                self.counters.invalid_loads += 1
                return Completion(Status.INVALID, tier=tier), None
            try:
                owner = state.alloc.owner_of(remote_addr)
            except (alloc_mod.OutOfRange, alloc_mod.BadAlignment):
                self.counters.invalid_loads += 1
                return Completion(Status.INVALID, tier=tier), None
            if owner == alloc_mod.UNOWNED:
                self.counters.invalid_loads += 1
                return Completion(Status.INVALID, tier=tier), None
            if owner != src_mid:
                self.counters.denied_loads += 1
                log.debug("load denied: mid %d asked for page of mid %d", src_mid, owner)
                return Completion(Status.PERMISSION_DENIED, tier=tier), None
            rel = remote_addr - state.alloc.base_addr
            self.counters.served_loads += 1
            completion = Completion(Status.OK, tier=tier, remote_addr=remote_addr)
            return completion, bytes(state.pages[rel : rel + wire.PAGE_SIZE])

    def handle_invalidate_page(self, src_mid: int, tier: Tier, remote_addr: int) -> None:
        """Free one page if owned by src_mid; silent on the wire either way."""
        with self._lock:
            state = self._tiers.get(tier) if tier in wire.DONOR_TIERS else None
            if state is None:
                self.counters.spurious_invalidations += 1
                return
            try:
                state.alloc.free_page(remote_addr, src_mid)
            except alloc_mod.PermissionDenied:
                self.counters.denied_invalidations += 1
                return
            except (alloc_mod.NotAllocated, alloc_mod.OutOfRange, alloc_mod.BadAlignment):
                self.counters.spurious_invalidations += 1
                return
            rel = remote_addr - state.alloc.base_addr
            state.pages[rel : rel + wire.PAGE_SIZE] = bytes(wire.PAGE_SIZE)
            self.counters.invalidations += 1

    def handle_invalidate_area(self, src_mid: int) -> None:
        """Free everything src_mid owns across both tiers; silent on the wire."""
        with self._lock:
            for state in self._tiers.values():
                owners = state.alloc.owner_bytes()
                freed = state.alloc.free_all(src_mid)
                if freed:
                    base = state.alloc.base_addr
                    for index, owner in enumerate(owners):
                        if owner == src_mid:
                            rel = index * wire.PAGE_SIZE
                            state.pages[rel : rel + wire.PAGE_SIZE] = bytes(wire.PAGE_SIZE)
            self.counters.area_invalidations += 1

    # -- wire-level dispatch ------------------------------------------------

    def dispatch(self, frame: transport.Frame) -> transport.Frame | None:
        """Decode a frame, route it, and encode the response (if any).

        Malformed frames from untrusted peers are dropped and counted, never
        raised: a byte pattern must not be able to take the donor down.
        """
        with self._lock:
            try:
                if frame.kind == transport.KIND_PACKET:
                    return self._dispatch_store(wire.decode_store_packet(frame.payload))
                return self._dispatch_command(wire.decode_command(frame.payload))
            except wire.WireError:
                self.counters.malformed_frames += 1
                return None

    def _check_dst(self, header: Command) -> bool:
        if header.dst_mid != self.config.my_mid:
            self.counters.mid_mismatch_frames += 1
            return False
        return True

    def _dispatch_store(self, pkt: wire.StorePacket) -> transport.Frame | None:
        header = pkt.header
        if header.opcode is not Opcode.STORE:
            self.counters.unexpected_frames += 1
            return None
        if not self._check_dst(header):
            return None
        completion = self.handle_store(header.src_mid, header.target_tier, pkt.page)
        completion.request_token = header.request_token
        return transport.command_frame(wire.encode_completion(completion))

    def _dispatch_command(self, header: Command) -> transport.Frame | None:
        if header.opcode is Opcode.LOAD:
            if not self._check_dst(header):
                return None
            completion, page = self.handle_load(header.src_mid, header.tier, header.remote_addr)
            completion.request_token = header.request_token
            if page is None:
                return transport.command_frame(wire.encode_completion(completion))
            response = LoadResponsePacket(
                header=Command(
                    opcode=Opcode.LOAD_RESPONSE,
                    src_mid=self.config.my_mid,
                    dst_mid=header.src_mid,
                    tier=header.tier,
                    target_tier=header.tier,
                    remote_addr=header.remote_addr,
                    request_token=header.request_token,
                    page_token=header.page_token,
                ),
                page=page,
            )
            return transport.packet_frame(wire.encode_load_response(response))
        if header.opcode is Opcode.INVALIDATE_PAGE:
            if self._check_dst(header):
                self.handle_invalidate_page(header.src_mid, header.tier, header.remote_addr)
            return None
        if header.opcode is Opcode.INVALIDATE_AREA:
            if self._check_dst(header):
                self.handle_invalidate_area(header.src_mid)
            return None
        # A bare Store command (page missing) or a response opcode has no
        # business arriving here; drop it.
        self.counters.unexpected_frames += 1
        return None

    # -- inspection ---------------------------------------------------------

    def free_count(self, tier: Tier) -> int:
        state = self._tiers.get(tier)
        return state.alloc.free_count if state else 0

    def owner_of(self, tier: Tier, remote_addr: int) -> int:
        state = self._tiers.get(tier)
        if state is None:
            raise alloc_mod.OutOfRange(f"tier {tier.name} not configured")
        return state.alloc.owner_of(remote_addr)

    def stats(self) -> dict:
        with self._lock:
            tiers = {}
            for tier, state in self._tiers.items():
                tiers[tier.name.lower()] = {
                    "capacity_pages": state.alloc.capacity_pages,
                    "reserved_pages": state.alloc.reserved_pages,
                    "free_count": state.alloc.free_count,
                }
            return {
                "mid": self.config.my_mid,
                "tiers": tiers,
                "counters": self.counters.as_dict(),
            }

    # -- snapshot persistence (ops/test tooling, not protocol) --------------

    def save_snapshot(self, path: str) -> None:
        """Write allocator state and page bytes; format in docs/protocol.md."""
        with self._lock, open(path, "wb") as fh:
            fh.write(_SNAP_HEADER.pack(_SNAPSHOT_MAGIC, _SNAPSHOT_VERSION, self.config.my_mid))
            for tier in (Tier.DONOR_HBM, Tier.DONOR_DRAM):
                state = self._tiers.get(tier)
                if state is None:
                    fh.write(_SNAP_TIER.pack(0, 0, 0))
                    continue
                a = state.alloc
                fh.write(_SNAP_TIER.pack(a.capacity_pages, a.base_addr, a.reserved_pages))
                fh.write(a.bitmap_bytes())
                fh.write(a.owner_bytes())
                fh.write(bytes(state.pages))

    @classmethod
    def load_snapshot(cls, path: str, rng: random.Random | None = None) -> "DonorEngine":
        with open(path, "rb") as fh:
            magic, version, my_mid = _SNAP_HEADER.unpack(fh.read(_SNAP_HEADER.size))
            if magic != _SNAPSHOT_MAGIC or version != _SNAPSHOT_VERSION:
                raise ValueError("not a donor snapshot file")
            tiers = []
            for _ in range(2):
                capacity, base, reserved = _SNAP_TIER.unpack(fh.read(_SNAP_TIER.size))
                if capacity == 0:
                    tiers.append(None)
                    continue
                bitmap = fh.read((capacity + 7) // 8)
                owners = fh.read(capacity)
                pages = bytearray(fh.read(capacity * wire.PAGE_SIZE))
                tiers.append((capacity, base, reserved, bitmap, owners, pages))
        hbm, dram = tiers
        config = DonorConfig(
            my_mid=my_mid,
            hbm_capacity_pages=hbm[0] if hbm else 0,
            dram_capacity_pages=dram[0] if dram else 0,
            hbm_base_addr=hbm[1] if hbm else DEFAULT_HBM_BASE,
            dram_base_addr=dram[1] if dram else DEFAULT_DRAM_BASE,
        )
        engine = cls(config, rng=rng)
        for tier, blob in ((Tier.DONOR_HBM, hbm), (Tier.DONOR_DRAM, dram)):
            if blob is None:
                continue
            capacity, base, reserved, bitmap, owners, pages = blob
            state = engine._tiers[tier]
            a = state.alloc
            a._bitmap[:] = bitmap
            a._owners[:] = owners
            a.reserved_pages = reserved
            a._free = [i for i in range(capacity) if not a._is_set(i)]
            a._active = any(owners[i] not in (0, alloc_mod.RESERVED_OWNER) for i in range(capacity))
            state.pages[:] = pages
        return engine


class DonorServer:
    """Pumps frames between transport endpoints and a donor engine.

    Many endpoints may be attached; each gets a pump thread, and the engine
    lock funnels their frames through the serial state machine.
    """

    def __init__(self, engine: DonorEngine):
        self.engine = engine
        self._threads: list[threading.Thread] = []
        self._endpoints: list[transport.Endpoint] = []
        self._listener: transport.TcpListener | None = None
        self._stopping = threading.Event()
        self._lock = threading.Lock()

    def attach(self, endpoint: transport.Endpoint) -> None:
        with self._lock:
            self._endpoints.append(endpoint)
            thread = threading.Thread(target=self._pump, args=(endpoint,), daemon=True)
            self._threads.append(thread)
            thread.start()

    def _pump(self, endpoint: transport.Endpoint) -> None:
        while not self._stopping.is_set():
            try:
                frame = endpoint.recv_frame()
            except transport.CorruptFraming:
                self.engine.counters.malformed_frames += 1
                return
            except transport.TransportError:
                return
            reply = self.engine.dispatch(frame)
            if reply is not None:
                try:
                    endpoint.send_frame(reply)
                except transport.TransportError:
                    return

    def serve_tcp(self, host: str, port: int) -> tuple[str, int]:
        """Listen and accept donee connections until stop(); returns bound address."""
        self._listener = transport.listen_tcp(host, port)
        thread = threading.Thread(target=self._accept_loop, daemon=True)
        with self._lock:
            self._threads.append(thread)
        thread.start()
        return self._listener.host, self._listener.port

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self._stopping.is_set():
            try:
                endpoint = self._listener.accept(timeout=0.2)
            except transport.Timeout:
                continue
            except transport.TransportError:
                return
            self.attach(endpoint)

    def stop(self) -> None:
        self._stopping.set()
        if self._listener is not None:
            self._listener.close()
        with self._lock:
            endpoints = list(self._endpoints)
            threads = list(self._threads)
        for endpoint in endpoints:
            endpoint.close()
        for thread in threads:
            if thread is not threading.current_thread():
                thread.join(timeout=5.0)
