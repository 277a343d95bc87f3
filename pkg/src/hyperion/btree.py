"""B+ tree key-value store whose nodes are 4096-byte blocks of one extent.

All operations are generators over :class:`~hyperion.blockio.BlockRequest`
(see :mod:`hyperion.blockio`), so the same code runs synchronously in tests
and from simulator events in the datapath.  Nothing is cached: every node
visit is a device read.  The superblock's fields are mirrored in memory as
slot metadata and written through, last, on every change.

On-block layout, little-endian, slot-relative block numbers:

Superblock (block 0)::

    0   u32  magic 0x48424B56 ("VKBH" on disk)
    4   u16  layout version (1)
    8   u64  root block
    16  u32  height (levels including the leaf level)
    24  u64  key count
    32  u64  free-list head (0 = empty)
    40  u64  free-list length
    48  u64  next never-used block
    56  u64  extent size in blocks

Node header (16 bytes)::

    0   u8   kind (1 = leaf, 2 = internal)
    2   u16  entry count n
    8   u64  next leaf (leaves only, 0 = last leaf)

Internal node: keys u64[254] at 16, children u64[255] at 2048.
Leaf: keys u64[29] at 16, values 128 B[29] at 248 (ends at 3960; the tail
is reserved).  A free block stores the next free block number at 0.
"""

from __future__ import annotations

import functools
import math
import struct
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .blockio import BlockRequest
from .nvme import BLOCK_SIZE

SUPERBLOCK_MAGIC = 0x48424B56
LAYOUT_VERSION = 1

KIND_LEAF = 1
KIND_INTERNAL = 2

HEADER_SIZE = 16
KEY_SIZE = 8
VALUE_SIZE = 128
FANOUT = 255
INTERNAL_MAX_KEYS = FANOUT - 1
LEAF_CAPACITY = 29
INTERNAL_MIN_KEYS = math.ceil(FANOUT / 2) - 1
LEAF_MIN_ENTRIES = math.ceil(LEAF_CAPACITY / 2)

KEYS_OFFSET = HEADER_SIZE
CHILDREN_OFFSET = 2048
VALUES_OFFSET = KEYS_OFFSET + LEAF_CAPACITY * KEY_SIZE

MAX_KEY = (1 << 64) - 1

_SUPER = struct.Struct("<IH2xQI4xQQQQQ")
_HEADER = struct.Struct("<BxH4xQ")
_U64 = struct.Struct("<Q")

assert KEYS_OFFSET + INTERNAL_MAX_KEYS * KEY_SIZE <= CHILDREN_OFFSET
assert CHILDREN_OFFSET + FANOUT * KEY_SIZE <= BLOCK_SIZE
assert VALUES_OFFSET + LEAF_CAPACITY * VALUE_SIZE <= BLOCK_SIZE


class BTreeError(Exception):
    pass


class ExtentTooSmall(BTreeError, ValueError):
    pass


class OutOfSpace(BTreeError):
    pass


class CorruptTree(BTreeError):
    pass


@dataclass
class Superblock:
    root: int
    height: int
    key_count: int
    free_head: int
    free_count: int
    next_unused: int
    capacity: int

    def encode(self) -> bytes:
        buf = bytearray(BLOCK_SIZE)
        _SUPER.pack_into(
            buf, 0, SUPERBLOCK_MAGIC, LAYOUT_VERSION, self.root, self.height, self.key_count,
            self.free_head, self.free_count, self.next_unused, self.capacity,
        )
        return bytes(buf)

    @classmethod
    def decode(cls, block: bytes) -> Superblock:
        magic, version, root, height, keys, fhead, fcount, nxt, cap = _SUPER.unpack_from(block, 0)
        if magic != SUPERBLOCK_MAGIC:
            raise CorruptTree(f"bad superblock magic {magic:#x}")
        if version != LAYOUT_VERSION:
            raise CorruptTree(f"unsupported layout version {version}")
        return cls(root, height, keys, fhead, fcount, nxt, cap)

    @property
    def free_blocks(self) -> int:
        return self.free_count + (self.capacity - self.next_unused)


@dataclass
class Node:
    lba: int
    leaf: bool
    keys: list[int] = field(default_factory=list)
    values: list[bytes] = field(default_factory=list)
    children: list[int] = field(default_factory=list)
    next_leaf: int = 0

    def encode(self) -> bytes:
        buf = bytearray(BLOCK_SIZE)
        n = len(self.keys)
        _HEADER.pack_into(buf, 0, KIND_LEAF if self.leaf else KIND_INTERNAL, n, self.next_leaf)
        struct.pack_into(f"<{n}Q", buf, KEYS_OFFSET, *self.keys)
        if self.leaf:
            for i, value in enumerate(self.values):
                off = VALUES_OFFSET + i * VALUE_SIZE
                buf[off:off + VALUE_SIZE] = value
        else:
            struct.pack_into(f"<{n + 1}Q", buf, CHILDREN_OFFSET, *self.children)
        return bytes(buf)

    @classmethod
    def decode(cls, lba: int, block: bytes) -> Node:
        kind, n, next_leaf = _HEADER.unpack_from(block, 0)
        if kind == KIND_LEAF:
            if n > LEAF_CAPACITY:
                raise CorruptTree(f"leaf {lba} claims {n} entries")
            keys = list(struct.unpack_from(f"<{n}Q", block, KEYS_OFFSET))
            values = [
                bytes(block[VALUES_OFFSET + i * VALUE_SIZE:VALUES_OFFSET + (i + 1) * VALUE_SIZE])
                for i in range(n)
            ]
            return cls(lba, True, keys, values, [], next_leaf)
        if kind == KIND_INTERNAL:
            if n > INTERNAL_MAX_KEYS:
                raise CorruptTree(f"internal node {lba} claims {n} keys")
            keys = list(struct.unpack_from(f"<{n}Q", block, KEYS_OFFSET))
            children = list(struct.unpack_from(f"<{n + 1}Q", block, CHILDREN_OFFSET))
            return cls(lba, False, keys, [], children, 0)
        raise CorruptTree(f"block {lba} has unknown node kind {kind}")


class LookupTrace(NamedTuple):
    blocks_read: int
    virtual_latency: int
    path: tuple[int, ...]


@dataclass
class IntegrityReport:
    violations: list[str] = field(default_factory=list)
    blocks_checked: int = 0
    keys: int = 0

    @property
    def clean(self) -> bool:
        return not self.violations


# tuple.__new__ skips the Python-level NamedTuple constructor on hot paths
_new_tuple = tuple.__new__


def _decode_search(block: bytes) -> tuple:
    """(block, kind, n, keys, children) for lookups; children is None for leaves."""
    kind = block[0]
    n = block[2] | block[3] << 8
    if kind == KIND_INTERNAL and n <= INTERNAL_MAX_KEYS:
        keys = _unpacker(n).unpack_from(block, KEYS_OFFSET)
        return block, kind, n, keys, _unpacker(n + 1).unpack_from(block, CHILDREN_OFFSET)
    if kind == KIND_LEAF and n <= LEAF_CAPACITY:
        return block, kind, n, _unpacker(n).unpack_from(block, KEYS_OFFSET), None
    return block, kind, 0, (), None


@functools.lru_cache(maxsize=None)
def _unpacker(count: int) -> struct.Struct:
    return struct.Struct(f"<{count}Q")


def _check_key_value(key: int, value: bytes | None = None) -> None:
    if not 0 <= key <= MAX_KEY:
        raise ValueError("keys are unsigned 64-bit integers")
    if value is not None and len(value) != VALUE_SIZE:
        raise ValueError(f"values are exactly {VALUE_SIZE} bytes")


class BTree:
    """Operations over one formatted extent.

    Every public method returns a generator; drive it with
    :meth:`ExtentIO.run_sync <hyperion.blockio.ExtentIO.run_sync>` or
    :meth:`ExtentIO.run_async <hyperion.blockio.ExtentIO.run_async>`.
    """

    def __init__(self) -> None:
        self.sb: Superblock | None = None
        # lba -> search fields of the block object last read there.  Blocks
        # are immutable bytes, so an identical object means identical content.
        self._decoded: dict[int, tuple] = {}

    # -- block plumbing ----------------------------------------------------

    def _read_node(self, lba: int):
        cmd = yield BlockRequest("read", lba)
        return Node.decode(lba, cmd.result)

    def _write_super(self, sb: Superblock):
        yield BlockRequest("write", 0, sb.encode())
        self.sb = sb

    def _alloc(self, sb: Superblock):
        if sb.free_head:
            lba = sb.free_head
            cmd = yield BlockRequest("read", lba)
            sb.free_head = _U64.unpack_from(cmd.result, 0)[0]
            sb.free_count -= 1
            return lba
        if sb.next_unused >= sb.capacity:
            raise OutOfSpace("extent exhausted")
        lba = sb.next_unused
        sb.next_unused += 1
        return lba

    def _free(self, sb: Superblock, lba: int):
        buf = bytearray(BLOCK_SIZE)
        _U64.pack_into(buf, 0, sb.free_head)
        yield BlockRequest("write", lba, bytes(buf))
        sb.free_head = lba
        sb.free_count += 1

    def _copy_sb(self) -> Superblock:
        if self.sb is None:
            raise BTreeError("tree is not formatted or opened")
        return Superblock(**vars(self.sb))

    # -- lifecycle ---------------------------------------------------------

    def format(self, block_count: int):
        if block_count < 3:
            raise ExtentTooSmall(f"a tree needs at least 3 blocks, extent has {block_count}")
        yield BlockRequest("write", 1, Node(1, True).encode())
        sb = Superblock(root=1, height=1, key_count=0, free_head=0, free_count=0,
                        next_unused=2, capacity=block_count)
        yield from self._write_super(sb)
        return sb

    def open(self):
        cmd = yield BlockRequest("read", 0)
        self.sb = Superblock.decode(cmd.result)
        return self.sb

    # -- queries -------------------------------------------------------------

    def get(self, key: int):
        """Return ``(value or None, LookupTrace)``; reads exactly ``height`` blocks."""
        sb = self.sb
        height = sb.height
        lba = sb.root
        path = []
        latency = 0
        decoded = self._decoded
        for _ in range(height):
            cmd = yield _new_tuple(BlockRequest, ("read", lba, None, 0))
            latency += cmd.completion_time - cmd.submit_time
            path.append(lba)
            block = cmd.result
            entry = decoded.get(lba)
            if entry is None or entry[0] is not block:
                entry = decoded[lba] = _decode_search(block)
            _, kind, n, keys, children = entry
            if kind == KIND_LEAF:
                if len(path) != height:
                    raise CorruptTree(f"leaf {lba} found above the leaf level")
                trace = _new_tuple(LookupTrace, (height, latency, tuple(path)))
                i = bisect_left(keys, key)
                if i < n and keys[i] == key:
                    off = VALUES_OFFSET + i * VALUE_SIZE
                    return block[off:off + VALUE_SIZE], trace
                return None, trace
            if kind != KIND_INTERNAL:
                raise CorruptTree(f"block {lba} is not a tree node")
            lba = children[bisect_right(keys, key)]
        raise CorruptTree("descent did not reach a leaf within the tree height")

    # -- updates -------------------------------------------------------------

    def _descend(self, key: int):
        sb = self.sb
        path: list[tuple[Node, int]] = []
        lba = sb.root
        for _ in range(sb.height):
            node = yield from self._read_node(lba)
            if node.leaf:
                return path, node
            i = bisect_right(node.keys, key)
            path.append((node, i))
            lba = node.children[i]
        raise CorruptTree("descent did not reach a leaf within the tree height")

    def put(self, key: int, value: bytes):
        """Insert or replace; returns ``"inserted"`` or ``"replaced"``."""
        _check_key_value(key, value)
        value = bytes(value)
        path, leaf = yield from self._descend(key)
        i = bisect_left(leaf.keys, key)
        if i < len(leaf.keys) and leaf.keys[i] == key:
            leaf.values[i] = value
            yield BlockRequest("write", leaf.lba, leaf.encode())
            return "replaced"

        sb = self._copy_sb()
        needed = 0
        if len(leaf.keys) >= LEAF_CAPACITY:
            needed = 1
            for node, _ in reversed(path):
                if len(node.keys) < INTERNAL_MAX_KEYS:
                    break
                needed += 1
            else:
                needed += 1  # new root
        if needed > sb.free_blocks:
            raise OutOfSpace(f"insert needs {needed} free blocks, {sb.free_blocks} available")

        leaf.keys.insert(i, key)
        leaf.values.insert(i, value)
        writes: list[Node] = [leaf]
        if len(leaf.keys) > LEAF_CAPACITY:
            right = Node((yield from self._alloc(sb)), True)
            half = len(leaf.keys) // 2
            right.keys, leaf.keys = leaf.keys[half:], leaf.keys[:half]
            right.values, leaf.values = leaf.values[half:], leaf.values[:half]
            right.next_leaf, leaf.next_leaf = leaf.next_leaf, right.lba
            writes.insert(0, right)
            sep, new_child = right.keys[0], right.lba
            while sep is not None:
                if not path:
                    root = Node((yield from self._alloc(sb)), False, [sep], [], [sb.root, new_child])
                    writes.insert(0, root)
                    sb.root = root.lba
                    sb.height += 1
                    break
                parent, ci = path.pop()
                parent.keys.insert(ci, sep)
                parent.children.insert(ci + 1, new_child)
                writes.append(parent)
                if len(parent.keys) <= INTERNAL_MAX_KEYS:
                    break
                sibling = Node((yield from self._alloc(sb)), False)
                mid = len(parent.keys) // 2
                up = parent.keys[mid]
                sibling.keys, parent.keys = parent.keys[mid + 1:], parent.keys[:mid]
                sibling.children, parent.children = parent.children[mid + 1:], parent.children[:mid + 1]
                writes.insert(0, sibling)
                sep, new_child = up, sibling.lba
        for node in writes:
            yield BlockRequest("write", node.lba, node.encode())
        sb.key_count += 1
        yield from self._write_super(sb)
        return "inserted"

    def delete(self, key: int):
        """Remove ``key``; returns True if it was present."""
        _check_key_value(key)
        path, leaf = yield from self._descend(key)
        i = bisect_left(leaf.keys, key)
        if i >= len(leaf.keys) or leaf.keys[i] != key:
            return False
        sb = self._copy_sb()
        root = path[0][0] if path else leaf
        del leaf.keys[i]
        del leaf.values[i]
        dirty: dict[int, Node] = {leaf.lba: leaf}
        freed: list[int] = []
        node = leaf
        while path:
            parent, ci = path.pop()
            minimum = LEAF_MIN_ENTRIES if node.leaf else INTERNAL_MIN_KEYS
            if len(node.keys) >= minimum:
                break
            left = right = None
            if ci > 0:
                left = yield from self._read_node(parent.children[ci - 1])
                if len(left.keys) > minimum:
                    self._borrow_left(parent, ci, left, node)
                    dirty[left.lba] = left
                    dirty[parent.lba] = parent
                    break
            if ci + 1 < len(parent.children):
                right = yield from self._read_node(parent.children[ci + 1])
                if len(right.keys) > minimum:
                    self._borrow_right(parent, ci, node, right)
                    dirty[right.lba] = right
                    dirty[parent.lba] = parent
                    break
            if left is not None:
                self._merge(parent, ci - 1, left, node)
                dirty[left.lba] = left
                dirty.pop(node.lba, None)
                freed.append(node.lba)
            else:
                self._merge(parent, ci, node, right)
                dirty[node.lba] = node
                freed.append(right.lba)
            dirty[parent.lba] = parent
            node = parent
        if not root.leaf and not root.keys:
            sb.root = root.children[0]
            sb.height -= 1
            dirty.pop(root.lba, None)
            freed.append(root.lba)
        for n in dirty.values():
            yield BlockRequest("write", n.lba, n.encode())
        for lba in freed:
            yield from self._free(sb, lba)
        sb.key_count -= 1
        yield from self._write_super(sb)
        return True

    @staticmethod
    def _borrow_left(parent: Node, ci: int, left: Node, node: Node) -> None:
        if node.leaf:
            node.keys.insert(0, left.keys.pop())
            node.values.insert(0, left.values.pop())
            parent.keys[ci - 1] = node.keys[0]
        else:
            node.keys.insert(0, parent.keys[ci - 1])
            node.children.insert(0, left.children.pop())
            parent.keys[ci - 1] = left.keys.pop()

    @staticmethod
    def _borrow_right(parent: Node, ci: int, node: Node, right: Node) -> None:
        if node.leaf:
            node.keys.append(right.keys.pop(0))
            node.values.append(right.values.pop(0))
            parent.keys[ci] = right.keys[0]
        else:
            node.keys.append(parent.keys[ci])
            node.children.append(right.children.pop(0))
            parent.keys[ci] = right.keys.pop(0)

    @staticmethod
    def _merge(parent: Node, sep_index: int, left: Node, right: Node) -> None:
        sep = parent.keys.pop(sep_index)
        parent.children.pop(sep_index + 1)
        if left.leaf:
            left.keys += right.keys
            left.values += right.values
            left.next_leaf = right.next_leaf
        else:
            left.keys += [sep] + right.keys
            left.children += right.children

    # -- bulk build ------------------------------------------------------------

    def bulk_load(self, items: Iterable[tuple[int, bytes]], leaf_fill: int = LEAF_CAPACITY,
                  internal_fill: int = FANOUT):
        """Build the tree bottom-up from sorted unique items (empty tree only).

        ``leaf_fill`` / ``internal_fill`` set the target entries per leaf and
        children per internal node; lower fills give taller trees.
        """
        if not LEAF_MIN_ENTRIES <= leaf_fill <= LEAF_CAPACITY:
            raise ValueError("leaf_fill outside the leaf occupancy bounds")
        if not INTERNAL_MIN_KEYS + 1 <= internal_fill <= FANOUT:
            raise ValueError("internal_fill outside the internal occupancy bounds")
        sb = self._copy_sb()
        if sb.key_count:
            raise BTreeError("bulk_load needs an empty tree")
        items = list(items)
        for k, v in items:
            _check_key_value(k, v)
        if any(a[0] >= b[0] for a, b in zip(items, items[1:])):
            raise ValueError("bulk_load items must be sorted with unique keys")
        if not items:
            return sb

        def groups(count: int, fill: int, cap: int) -> list[int]:
            k = max(1, count // fill, -(-count // cap))
            base, extra = divmod(count, k)
            return [base + (1 if g < extra else 0) for g in range(k)]

        total = 0
        sizes = groups(len(items), leaf_fill, LEAF_CAPACITY)
        level: list[tuple[int, int]] = []  # (lba, first key)
        leaves: list[Node] = []
        for size in sizes:
            leaves.append(Node((yield from self._alloc(sb)), True))
        for node, size in zip(leaves, sizes):
            chunk = items[total:total + size]
            total += size
            node.keys = [k for k, _ in chunk]
            node.values = [bytes(v) for _, v in chunk]
        for a, b in zip(leaves, leaves[1:]):
            a.next_leaf = b.lba
        for node in leaves:
            yield BlockRequest("write", node.lba, node.encode())
            level.append((node.lba, node.keys[0]))
        height = 1
        while len(level) > 1:
            sizes = groups(len(level), internal_fill, FANOUT)
            parents: list[tuple[int, int]] = []
            pos = 0
            for size in sizes:
                chunk = level[pos:pos + size]
                pos += size
                node = Node((yield from self._alloc(sb)), False)
                node.children = [lba for lba, _ in chunk]
                node.keys = [first for _, first in chunk[1:]]
                yield BlockRequest("write", node.lba, node.encode())
                parents.append((node.lba, chunk[0][1]))
            level = parents
            height += 1
        old_root = sb.root
        sb.root = level[0][0]
        sb.height = height
        sb.key_count = len(items)
        yield from self._free(sb, old_root)
        yield from self._write_super(sb)
        return sb

    # -- verification ------------------------------------------------------------

    def check_integrity(self):
        """Full scan; returns an :class:`IntegrityReport` (never raises)."""
        report = IntegrityReport()
        bad = report.violations
        try:
            cmd = yield BlockRequest("read", 0)
            sb = Superblock.decode(cmd.result)
        except CorruptTree as err:
            bad.append(f"block 0: {err}")
            return report
        if sb.height < 1:
            bad.append(f"block 0: height {sb.height} < 1")
            return report

        def valid_ref(lba: int) -> bool:
            return 1 <= lba < sb.capacity and lba < sb.next_unused

        seen: set[int] = set()
        leaves: list[Node] = []
        # lba, depth, low bound (incl), high bound (excl), referring block
        stack = [(sb.root, 1, None, None, 0)]
        while stack:
            lba, depth, lo, hi, parent = stack.pop()
            if not valid_ref(lba):
                bad.append(f"block {parent}: child reference {lba} outside the allocated extent")
                continue
            if lba in seen:
                bad.append(f"block {parent}: child {lba} referenced more than once")
                continue
            seen.add(lba)
            cmd = yield BlockRequest("read", lba)
            report.blocks_checked += 1
            try:
                node = Node.decode(lba, cmd.result)
            except CorruptTree as err:
                bad.append(f"block {lba}: {err}")
                continue
            keys = node.keys
            if any(a >= b for a, b in zip(keys, keys[1:])):
                bad.append(f"block {lba}: keys not strictly ascending")
            if keys and lo is not None and keys[0] < lo:
                bad.append(f"block {lba}: key {keys[0]} below separator {lo}")
            if keys and hi is not None and keys[-1] >= hi:
                bad.append(f"block {lba}: key {keys[-1]} not below separator {hi}")
            is_root = lba == sb.root
            if node.leaf:
                if depth != sb.height:
                    bad.append(f"block {lba}: leaf at depth {depth}, tree height {sb.height}")
                if not is_root and len(keys) < LEAF_MIN_ENTRIES:
                    bad.append(f"block {lba}: leaf holds {len(keys)} < {LEAF_MIN_ENTRIES} entries")
                leaves.append(node)
                report.keys += len(keys)
            else:
                if depth >= sb.height:
                    bad.append(f"block {lba}: internal node at leaf depth {depth}")
                    continue
                if is_root and len(keys) < 1:
                    bad.append(f"block {lba}: internal root without keys")
                if not is_root and len(keys) < INTERNAL_MIN_KEYS:
                    bad.append(f"block {lba}: internal node holds {len(keys)} < {INTERNAL_MIN_KEYS} keys")
                bounds = [lo] + keys + [hi]
                # push right-to-left so leaves come off the stack in key order
                for c in range(len(node.children) - 1, -1, -1):
                    stack.append((node.children[c], depth + 1, bounds[c], bounds[c + 1], lba))

        for a, b in zip(leaves, leaves[1:]):
            if a.next_leaf != b.lba:
                bad.append(f"block {a.lba}: next-leaf {a.next_leaf} should be {b.lba}")
            if a.keys and b.keys and a.keys[-1] >= b.keys[0]:
                bad.append(f"block {b.lba}: keys overlap previous leaf {a.lba}")
        if leaves and leaves[-1].next_leaf != 0:
            bad.append(f"block {leaves[-1].lba}: last leaf links to {leaves[-1].next_leaf}")
        if report.keys != sb.key_count:
            bad.append(f"block 0: key count {sb.key_count} but {report.keys} keys reachable")

        free_seen: set[int] = set()
        lba = sb.free_head
        while lba:
            if not valid_ref(lba):
                bad.append(f"block {lba}: free-list entry outside the allocated extent")
                break
            if lba in free_seen:
                bad.append(f"block {lba}: free-list cycle")
                break
            if lba in seen:
                bad.append(f"block {lba}: on the free list but reachable from the root")
            free_seen.add(lba)
            cmd = yield BlockRequest("read", lba)
            lba = _U64.unpack_from(cmd.result, 0)[0]
        if len(free_seen) != sb.free_count and not any("free-list" in v for v in bad):
            bad.append(f"block 0: free count {sb.free_count} but {len(free_seen)} blocks on the list")
        return report
