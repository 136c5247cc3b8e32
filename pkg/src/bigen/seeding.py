"""Named sub-seed derivation.

All randomness in a run flows from one root seed. Components (data, init,
masking, gumbel, sampling, ...) draw their own sub-seed by name so that a
single component can be reproduced in isolation.
"""

import hashlib

__all__ = ["derive_seed"]


def derive_seed(root: int, name: str) -> int:
    """Derive a stable 63-bit sub-seed from a root seed and a component name."""
    digest = hashlib.sha256(f"{root}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
