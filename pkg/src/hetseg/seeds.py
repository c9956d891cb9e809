"""Seed derivation: every component seed is a hash of the master seed and
the component's name, so adding a component never shifts the others."""
import hashlib


def derive_seed(master_seed: int, component: str) -> int:
    digest = hashlib.sha256(f"{int(master_seed)}/{component}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
