"""Multiply-add accounting for instrumented forward passes.

Kernels call :func:`add_madds`; the count lands in the innermost active
:class:`MaddCounter` under its current stage label. Counters are thread-local,
so concurrent runs never share an accumulator.
"""
from __future__ import annotations

import threading
from collections import defaultdict
from contextlib import contextmanager
from typing import Iterator

_local = threading.local()


def _stack() -> list["MaddCounter"]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class MaddCounter:
    def __init__(self) -> None:
        self.counts: dict[str, int] = defaultdict(int)
        self._stages: list[str] = []

    def __enter__(self) -> "MaddCounter":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    @property
    def current_stage(self) -> str:
        return self._stages[-1] if self._stages else "other"

    def add(self, n: int) -> None:
        self.counts[self.current_stage] += int(n)

    def total(self, prefix: str = "") -> int:
        """Sum of all stages equal to ``prefix`` or nested under ``prefix.``."""
        if not prefix:
            return sum(self.counts.values())
        return sum(
            v for k, v in self.counts.items() if k == prefix or k.startswith(prefix + ".")
        )


def add_madds(n: int) -> None:
    stack = _stack()
    if stack:
        stack[-1].add(n)


@contextmanager
def stage(name: str) -> Iterator[None]:
    """Label madds recorded inside the block; nested labels join with dots."""
    stack = _stack()
    if not stack:
        yield
        return
    counter = stack[-1]
    parent = counter._stages[-1] if counter._stages else ""
    counter._stages.append(f"{parent}.{name}" if parent else name)
    try:
        yield
    finally:
        counter._stages.pop()
