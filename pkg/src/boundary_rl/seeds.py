"""Deterministic seed derivation for reproducible sub-streams."""

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix_seed(seed: int, k: int) -> int:
    """Derive child seed k from a base seed.

    Mixing rule: xor the base seed with k times the 64-bit golden ratio
    constant, then apply the splitmix64 finalizer. Distinct k values give
    well-separated streams even for small or equal base seeds.
    """
    x = (int(seed) ^ ((int(k) + 1) * _GOLDEN)) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64
