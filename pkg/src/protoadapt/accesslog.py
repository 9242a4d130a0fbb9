"""Process-wide log of files opened by the data-access layer.

Lets a run manifest record exactly which inputs were touched, and lets tests
audit that the adaptation path never opens source samples or held-out labels.
"""
from __future__ import annotations

import os

_reads: list[str] = []


def record_read(path) -> None:
    _reads.append(os.path.abspath(str(path)))


def reads() -> list[str]:
    return list(_reads)


def clear() -> None:
    _reads.clear()
