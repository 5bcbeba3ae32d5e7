import csv
import os
from pathlib import Path
from typing import Generic, List, Type, TypeVar

from pydantic import BaseModel

RowT = TypeVar("RowT", bound=BaseModel)


class MetricsRepository(Generic[RowT]):
    """
    Repository for one CSV file of typed rows

    Rows are buffered and the whole file is rewritten through a temporary
    file and os.replace, so readers never observe a partial row.
    """

    def __init__(self, path: Path, row_model: Type[RowT], flush_every: int = 20):
        self.path = Path(path)
        self.row_model = row_model
        self.flush_every = flush_every
        self.rows: List[RowT] = []
        self._unflushed = 0

    @property
    def header(self) -> List[str]:
        return list(self.row_model.model_fields)

    def append(self, row: RowT) -> None:
        self.rows.append(row)
        self._unflushed += 1
        if self._unflushed >= self.flush_every:
            self.flush()

    def extend(self, rows: List[RowT]) -> None:
        for row in rows:
            self.append(row)

    def flush(self) -> None:
        """Rewrite the file with every buffered row"""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp")
        with open(tmp, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.header)
            for row in self.rows:
                values = row.model_dump()
                writer.writerow([values[name] for name in self.header])
        os.replace(tmp, self.path)
        self._unflushed = 0

    def __enter__(self) -> "MetricsRepository[RowT]":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.flush()

    @classmethod
    def read(cls, path: Path, row_model: Type[RowT]) -> List[RowT]:
        """Parse a CSV written by this repository back into rows"""
        with open(path, newline="", encoding="utf-8") as f:
            return [row_model.model_validate(record) for record in csv.DictReader(f)]
