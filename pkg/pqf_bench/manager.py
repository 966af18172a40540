from collections import defaultdict
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional

import numpy as np

from pqf_bench.samplers import ClickBatch


class RecordSetError(ValueError):
    pass


def _lookup(name: str, value: Any) -> Callable[[ClickBatch], np.ndarray]:
    base, _, operator = name.partition("__")
    if base not in ("unitary_id", "lost"):
        raise RecordSetError(f'Unknown filter "{name}"')
    if operator not in ("", "in"):
        raise RecordSetError(f'Unknown lookup "{operator}" on "{base}"')
    values = set(value) if operator == "in" else {value}

    def mask(batch: ClickBatch) -> np.ndarray:
        if base == "unitary_id":
            return np.full(len(batch), batch.unitary_id in values)
        return np.isin(batch.lost, sorted(values))

    return mask


class RecordSet:
    """Lazy, chainable view over click batches, one batch per unitary."""

    def __init__(self, batches: Iterable[ClickBatch], **kwargs):
        self._source = tuple(batches)
        self._filters: Dict[str, Any] = kwargs.get("filters", {})
        self._cache: Optional[List[ClickBatch]] = None

    def modify(self, **kwargs) -> "RecordSet":
        _filters = {
            **self._filters,
            **kwargs.get("filters", {}),
        }
        return RecordSet(self._source, filters=_filters)

    def filter(self, **kwargs) -> "RecordSet":
        for name, value in kwargs.items():
            _lookup(name, value)
        return self.modify(filters=kwargs)

    def _fetch_iterate(self) -> Iterator[ClickBatch]:
        lookups = [_lookup(name, value) for name, value in self._filters.items()]
        for batch in self._source:
            if not lookups:
                yield batch
                continue
            keep = np.ones(len(batch), dtype=bool)
            for lookup in lookups:
                keep &= lookup(batch)
            if keep.any():
                yield ClickBatch(batch.unitary_id, batch.n, batch.patterns[keep])

    def _fetch_all(self) -> List[ClickBatch]:
        if self._cache is None:
            self._cache = list(self._fetch_iterate())
        return self._cache

    def all(self) -> List[ClickBatch]:
        return self._fetch_all()

    def by_unitary(self) -> Dict[str, ClickBatch]:
        grouped: Dict[str, List[ClickBatch]] = defaultdict(list)
        for batch in self._fetch_all():
            grouped[batch.unitary_id].append(batch)
        return {
            unitary_id: batches[0]
            if len(batches) == 1
            else ClickBatch(
                unitary_id, batches[0].n, np.concatenate([batch.patterns for batch in batches])
            )
            for unitary_id, batches in grouped.items()
        }

    def sectors(self) -> Dict[int, int]:
        """Record count per loss sector."""
        counts: Dict[int, int] = defaultdict(int)
        for batch in self._fetch_all():
            for sector, count in zip(*np.unique(batch.lost, return_counts=True)):
                counts[int(sector)] += int(count)
        return dict(sorted(counts.items()))

    def count(self) -> int:
        return sum(len(batch) for batch in self._fetch_all())

    def patterns(self) -> np.ndarray:
        batches = self._fetch_all()
        if not batches:
            return np.empty((0, 0), dtype=np.int64)
        return np.concatenate([batch.patterns for batch in batches])

    def __getitem__(self, k) -> ClickBatch:
        return self._fetch_all()[k]

    def __iter__(self) -> Iterator[ClickBatch]:
        return iter(self._fetch_all())

    def __len__(self) -> int:
        return len(self._fetch_all())

    def __bool__(self) -> bool:
        return bool(self._fetch_all())
