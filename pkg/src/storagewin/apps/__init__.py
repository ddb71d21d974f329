"""Workloads built on the window API: a CAS-based distributed hash table
and a particle checkpoint/restart kernel."""

from .checkpoint import checkpoint, swap_checkpoint
from .dht import (
    DhtConfig, DhtTable, FillStats, InsertOutcome, dht_checkpoint, dht_create, dht_fill,
    dht_free, dht_insert, dht_lookup, local_items, owner, reference_map,
)
from .hacc import (
    RECORD_DTYPE, RECORD_SIZE, ParticleSet, generate_particles, hacc_checkpoint,
    hacc_restart, hacc_window, reference_checkpoint, reference_restart,
)

__all__ = [
    "checkpoint", "swap_checkpoint",
    "DhtConfig", "DhtTable", "FillStats", "InsertOutcome", "dht_checkpoint", "dht_create",
    "dht_fill", "dht_free", "dht_insert", "dht_lookup", "local_items", "owner", "reference_map",
    "RECORD_DTYPE", "RECORD_SIZE", "ParticleSet", "generate_particles", "hacc_checkpoint",
    "hacc_restart", "hacc_window", "reference_checkpoint", "reference_restart",
]
