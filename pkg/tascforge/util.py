import math
from typing import Generator, Sequence


def make_chunks[T](a: Sequence[T], chunk_size: int) -> Generator[Sequence[T], None, None]:
    for start in range(0, len(a), chunk_size):
        yield a[start : start + chunk_size]


def prune_count(rate: float, n: int) -> int:
    """⌈rate·n⌉, robust to the float error in products like 0.05 * 60."""
    return math.ceil(round(rate * n, 9))
