import hashlib


def derive_seed(seed: int, *labels) -> int:
    """Stable 63-bit seed from a root seed and subsystem labels."""
    key = ":".join([str(int(seed))] + [str(x) for x in labels])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little") >> 1
