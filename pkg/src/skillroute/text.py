"""Tokenization and hashed bag-of-tokens similarity.

Hashing uses CRC32 rather than ``hash()`` so results do not depend on
``PYTHONHASHSEED``.
"""

from __future__ import annotations

import math
import re
import zlib
from collections import Counter
from typing import Iterable

_TOKEN = re.compile(r"[a-z0-9_:]+")
N_BUCKETS = 1 << 20


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def bucket(token: str) -> int:
    return zlib.crc32(token.encode("utf-8")) % N_BUCKETS


def hashed_bag(text: str) -> Counter[int]:
    return Counter(bucket(t) for t in tokenize(text))


def cosine(a: Counter, b: Counter) -> float:
    if not a or not b:
        return 0.0
    if len(a) > len(b):
        a, b = b, a
    dot = sum(v * b[k] for k, v in a.items() if k in b)
    if dot == 0:
        return 0.0
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    return dot / (na * nb)


def hashed_cosine(text_a: str, text_b: str) -> float:
    return cosine(hashed_bag(text_a), hashed_bag(text_b))


def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)
