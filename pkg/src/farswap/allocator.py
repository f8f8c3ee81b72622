"""4KB-granular page allocator with per-page ownership and random placement.

One allocator manages one memory tier: a bitmap records allocation status
(for an 8GB tier that is 2,097,152 bits, 256KB), a parallel byte array
records the owning machine ID of every allocated page, and a dense free
list enables O(1) uniform-random allocation via swap-remove. Random free
page selection is what prevents a tier's address stream from revealing the
requester's access pattern, so uniformity here is a correctness property,
not a heuristic.

Machine IDs are 8-bit. MID 0 means unowned, MID 255 is the reserved-block
sentinel; real machines use 1..254.
"""

from __future__ import annotations

import random

from .wire import PAGE_SIZE

UNOWNED = 0
RESERVED_OWNER = 255
MAX_MID = 254


class AllocatorError(Exception):
    pass


class BadAlignment(AllocatorError):
    pass


class Exhausted(AllocatorError):
    pass


class NotAllocated(AllocatorError):
    pass


class PermissionDenied(AllocatorError):
    pass


class OutOfRange(AllocatorError):
    pass


class AlreadyActive(AllocatorError):
    """reserve_block was called after the allocator started serving."""


def _check_mid(mid: int) -> int:
    if not 1 <= mid <= MAX_MID:
        raise ValueError(f"machine id must be in 1..{MAX_MID}, got {mid}")
    return mid


class PageAllocator:
    """Fixed-capacity allocator over pages [base_addr, base_addr + 4096 * capacity)."""

    def __init__(self, capacity_pages: int, base_addr: int):
        if capacity_pages < 1:
            raise ValueError("capacity_pages must be >= 1")
        if base_addr % PAGE_SIZE:
            raise BadAlignment(f"base_addr {base_addr:#x} is not page-aligned")
        self.capacity_pages = capacity_pages
        self.base_addr = base_addr
        self.reserved_pages = 0
        self._bitmap = bytearray((capacity_pages + 7) // 8)
        self._owners = bytearray(capacity_pages)
        self._free = list(range(capacity_pages))
        self._active = False

    @property
    def free_count(self) -> int:
        return len(self._free)

    def bitmap_bytes(self) -> bytes:
        """Copy of the allocation bitmap (bit i set = page i allocated)."""
        return bytes(self._bitmap)

    def owner_bytes(self) -> bytes:
        """Copy of the per-page owner array."""
        return bytes(self._owners)

    def _index(self, addr: int) -> int:
        rel = addr - self.base_addr
        if rel % PAGE_SIZE:
            raise BadAlignment(f"address {addr:#x} is not page-aligned")
        index = rel // PAGE_SIZE
        if not 0 <= index < self.capacity_pages:
            raise OutOfRange(f"address {addr:#x} outside tier")
        return index

    def _is_set(self, index: int) -> bool:
        return bool(self._bitmap[index >> 3] & (1 << (index & 7)))

    def _set(self, index: int) -> None:
        self._bitmap[index >> 3] |= 1 << (index & 7)

    def _clear(self, index: int) -> None:
        self._bitmap[index >> 3] &= ~(1 << (index & 7))

    def alloc_random(self, owner: int, rng: random.Random) -> int:
        """Allocate one page chosen uniformly among all free pages.

        Returns the page's byte address. Raises Exhausted when no page is
        free.
        """
        _check_mid(owner)
        free = self._free
        if not free:
            raise Exhausted("no free pages")
        j = rng.randrange(len(free))
        index = free[j]
        last = free.pop()
        if j < len(free):
            free[j] = last
        self._set(index)
        self._owners[index] = owner
        self._active = True
        return self.base_addr + index * PAGE_SIZE

    def free_page(self, addr: int, requester: int) -> None:
        """Free one page, but only for the machine that owns it."""
        _check_mid(requester)
        index = self._index(addr)
        if not self._is_set(index):
            raise NotAllocated(f"page at {addr:#x} is already free")
        if self._owners[index] != requester:
            raise PermissionDenied(
                f"page at {addr:#x} owned by mid {self._owners[index]}, not {requester}"
            )
        self._clear(index)
        self._owners[index] = UNOWNED
        self._free.append(index)

    def owner_of(self, addr: int) -> int:
        """Owning machine id of the page at addr; 0 when free."""
        return self._owners[self._index(addr)]

    def free_all(self, owner: int) -> int:
        """Free every page owned by the given machine; returns how many."""
        _check_mid(owner)
        freed = 0
        owners = self._owners
        for index in range(self.capacity_pages):
            if owners[index] == owner:
                self._clear(index)
                owners[index] = UNOWNED
                self._free.append(index)
                freed += 1
        return freed

    def reserve_block(self, first_n_pages: int) -> None:
        """Permanently carve the first n pages out of the allocatable range.

        Used for tier metadata kept at low addresses. Must be called before
        the allocator serves its first allocation.
        """
        if first_n_pages == 0:
            return
        if self._active or self.reserved_pages:
            raise AlreadyActive("reserve_block must precede any allocation")
        if not 0 <= first_n_pages <= self.capacity_pages:
            raise OutOfRange(f"cannot reserve {first_n_pages} of {self.capacity_pages} pages")
        for index in range(first_n_pages):
            self._set(index)
            self._owners[index] = RESERVED_OWNER
        self._free = list(range(first_n_pages, self.capacity_pages))
        self.reserved_pages = first_n_pages
