from __future__ import annotations


def round_up(x: int, multiple: int) -> int:
    return -(-x // multiple) * multiple


def round_down(x: int, multiple: int) -> int:
    return x // multiple * multiple


def divisors(x: int) -> list[int]:
    small, large = [], []
    d = 1
    while d * d <= x:
        if x % d == 0:
            small.append(d)
            if d * d != x:
                large.append(x // d)
        d += 1
    return small + large[::-1]


def nearest_multiples(x: int, multiple: int, count: int = 2) -> list[int]:
    """Positive multiples of ``multiple`` closest to ``x``, nearest first
    (ties prefer the smaller value). ``x`` itself is excluded."""
    below = round_down(x, multiple)
    out = []
    lo = below if below != x else below - multiple
    hi = round_up(x, multiple)
    if hi == x:
        hi += multiple
    while len(out) < count:
        if lo >= multiple and (x - lo) <= (hi - x):
            out.append(lo)
            lo -= multiple
        else:
            out.append(hi)
            hi += multiple
    return out


def pad_vocab(v: int, multiple: int = 64) -> int:
    """Smallest multiple of ``multiple`` that is >= ``v``."""
    if v < 1:
        raise ValueError(f"vocab size must be positive, got {v}")
    return round_up(v, multiple)


def fix_heads(h: int, a: int) -> list[int]:
    """Head counts ``a'`` giving an integral head dimension that is a
    multiple of 64, nearest to ``a`` first. Empty when 64 does not divide h."""
    if h % 64:
        return []
    return sorted((d for d in divisors(h // 64)), key=lambda ap: (abs(ap - a), ap))
