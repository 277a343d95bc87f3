"""In-process key-value setups shared by the CLI and the test suites.

Keys are sharded by ``key % len(slots)``, matching the client's routing, and
each shard is bulk-loaded at minimum node occupancy so that a given key
count yields the tallest tree the occupancy rules allow.
"""

from __future__ import annotations

from dataclasses import dataclass

from .btree import INTERNAL_MIN_KEYS, LEAF_MIN_ENTRIES
from .client import Client, VirtualTransport, value_for
from .config import Config
from .server import Emulator
from .slots import Tenant

DEFAULT_TENANT = 1
DEFAULT_TOKEN = bytes(range(32))
KV_BUDGET = 512


def keys_for_height(height: int) -> int:
    """Smallest shard size that bulk-loads (at minimum fill) to ``height`` levels."""
    if height < 1:
        raise ValueError("height must be positive")
    if height == 1:
        return LEAF_MIN_ENTRIES
    return 2 * LEAF_MIN_ENTRIES * (INTERNAL_MIN_KEYS + 1) ** (height - 2)


def blocks_for(keys: int) -> int:
    """Extent size for a shard of ``keys`` with room left for updates."""
    nodes = 0
    level = max(1, -(-keys // LEAF_MIN_ENTRIES))
    while True:
        nodes += level
        if level == 1:
            break
        level = -(-level // (INTERNAL_MIN_KEYS + 1))
    return 2 * nodes + 16


@dataclass
class Testbed:
    emulator: Emulator
    client: Client
    slots: list[int]
    key_space: int

    @property
    def manager(self):
        return self.emulator.manager

    def height(self, slot: int) -> int:
        return self.manager.slot(slot).tree.sb.height


def kv_testbed(
    config: Config | None = None,
    *,
    slots: int = 1,
    height: int = 3,
    keys_per_slot: int | None = None,
    tenant_id: int = DEFAULT_TENANT,
    token: bytes = DEFAULT_TOKEN,
    **emulator_options,
) -> Testbed:
    """An emulator with ``slots`` kv slots, each preloaded to ``height`` levels."""
    config = config or Config()
    if not any(t.tenant_id == tenant_id for t in config.tenants):
        config.tenants.append(Tenant(tenant_id, token))
    emulator = Emulator(config, **emulator_options)
    manager = emulator.manager
    per_slot = keys_per_slot if keys_per_slot is not None else keys_for_height(height)
    blocks = blocks_for(per_slot)
    slot_ids = [
        manager.create_slot(tenant_id, token, manager.builtins["kv-btree"], blocks, budget=KV_BUDGET).slot_id
        for _ in range(slots)
    ]
    for shard, sid in enumerate(slot_ids):
        tree = manager.slot(sid).tree
        items = [(k, value_for(k)) for k in range(shard, per_slot * slots, slots)]
        manager.run_job(sid, lambda tree=tree, items=items: tree.bulk_load(
            items, LEAF_MIN_ENTRIES, INTERNAL_MIN_KEYS + 1))
        if keys_per_slot is None and tree.sb.height != height:
            raise AssertionError(f"slot {sid} loaded to height {tree.sb.height}, wanted {height}")
    client = Client(VirtualTransport(emulator.network), tenant_id, token)
    return Testbed(emulator, client, slot_ids, per_slot * slots)
