"""
Dataset loading for the welfare-bounds toolkit.

Reads a CSV with a header row, keeps the columns named by a SchemaMapping,
parses every cell as a decimal number and validates the dataset invariants:
binary treatment, outcomes inside the declared support, no missing values.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .errors import CsvParseError, DomainError, SchemaError
from .models import OutcomeSupport, SchemaMapping

logger = logging.getLogger(__name__)

MODULE = "core-data"


# ==================== Dataset ====================

@dataclass(frozen=True)
class Dataset:
    """
    Immutable table of observations (y, d, x..., z) with a declared support.

    ``frame`` keeps the original column names; its index holds the 0-based
    row position in the source data, and subsets produced by :meth:`take`
    keep those labels so errors can point back at the original row.
    """
    frame: pd.DataFrame
    schema: SchemaMapping
    support: OutcomeSupport

    # ==================== Construction ====================

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        schema: SchemaMapping,
        support: OutcomeSupport,
    ) -> "Dataset":
        """
        Validate a numeric frame and wrap it.

        Raises:
            SchemaError: A mapped column is absent
            DomainError: Non-binary treatment, outcome outside the support,
                non-finite value or an empty table
        """
        missing = [name for name in schema.columns() if name not in frame.columns]
        if missing:
            raise SchemaError(f"missing column(s) {missing}", module=MODULE, column=missing[0])
        if len(frame) < 1:
            raise DomainError("dataset has no rows", module=MODULE)

        data = frame.loc[:, schema.columns()].copy()
        data = data.reset_index(drop=True)
        for column in schema.columns():
            data[column] = data[column].astype(float)
            values = data[column].to_numpy()
            bad = np.flatnonzero(~np.isfinite(values))
            if bad.size:
                raise DomainError("non-finite value", module=MODULE, row=int(bad[0]), column=column)

        d = data[schema.d].to_numpy()
        bad = np.flatnonzero((d != 0.0) & (d != 1.0))
        if bad.size:
            raise DomainError(
                f"treatment must be 0 or 1, got {d[bad[0]]!r}",
                module=MODULE, row=int(bad[0]), column=schema.d,
            )
        data[schema.d] = d.astype(np.int64)

        y = data[schema.y].to_numpy()
        bad = np.flatnonzero((y < support.lower) | (y > support.upper))
        if bad.size:
            raise DomainError(
                f"outcome {y[bad[0]]!r} outside support [{support.lower}, {support.upper}]",
                module=MODULE, row=int(bad[0]), column=schema.y,
            )

        return cls(frame=data, schema=schema, support=support)

    @classmethod
    def from_arrays(
        cls,
        y: Sequence[float],
        d: Sequence[int],
        x: Optional[Dict[str, Sequence[float]]] = None,
        z: Optional[Sequence[float]] = None,
        support: Union[OutcomeSupport, Sequence[float]] = (0.0, 1.0),
    ) -> "Dataset":
        """Convenience constructor using column names y, d, the x keys and z."""
        if not isinstance(support, OutcomeSupport):
            support = OutcomeSupport(lower=support[0], upper=support[1])
        columns: Dict[str, Sequence[float]] = {"y": y, "d": d}
        x = x or {}
        columns.update(x)
        if z is not None:
            columns["z"] = z
        schema = SchemaMapping(y="y", d="d", x=list(x), z="z" if z is not None else None)
        return cls.from_frame(pd.DataFrame(columns), schema, support)

    # ==================== Accessors ====================

    @property
    def n(self) -> int:
        return len(self.frame)

    @property
    def x_cols(self) -> List[str]:
        return list(self.schema.x)

    @property
    def z_col(self) -> Optional[str]:
        return self.schema.z

    @property
    def y(self) -> np.ndarray:
        return self.frame[self.schema.y].to_numpy(dtype=float, copy=True)

    @property
    def d(self) -> np.ndarray:
        return self.frame[self.schema.d].to_numpy(dtype=np.int64, copy=True)

    @property
    def z(self) -> Optional[np.ndarray]:
        if self.schema.z is None:
            return None
        return self.frame[self.schema.z].to_numpy(dtype=float, copy=True)

    @property
    def covariates(self) -> pd.DataFrame:
        """Covariate columns (plus the instrument when mapped)."""
        columns = self.x_cols + ([self.schema.z] if self.schema.z else [])
        return self.frame.loc[:, columns].copy()

    def take(self, positions: Sequence[int]) -> "Dataset":
        """Rows at the given positions, original index labels preserved."""
        return Dataset(
            frame=self.frame.iloc[np.asarray(positions, dtype=np.int64)].copy(),
            schema=self.schema,
            support=self.support,
        )

    def with_instrument(self, column: str, values: Sequence[float]) -> "Dataset":
        """Copy whose instrument role is played by ``column`` holding ``values``."""
        frame = self.frame.copy()
        frame[column] = np.asarray(values, dtype=float)
        extra = [name for name in self.schema.extra if name != column]
        if self.schema.z is not None and self.schema.z != column:
            extra.append(self.schema.z)
        schema = self.schema.model_copy(update={"z": column, "extra": extra})
        return Dataset(frame=frame, schema=schema, support=self.support)


# ==================== Loader ====================

class DatasetLoader:
    """
    Reads observation tables from CSV files.

    Responsibilities:
    - Parse a UTF-8 CSV with a unique header row
    - Keep only the columns named by the schema mapping
    - Report parse and domain failures with their row and column
    """

    def __init__(self, data_dir: Union[str, Path] = "."):
        self.data_dir = Path(data_dir)
        logger.debug(f"DatasetLoader initialized with data directory: {self.data_dir}")

    def _read_cells(self, file_path: Path) -> pd.DataFrame:
        if not file_path.exists():
            raise SchemaError(f"data file not found: {file_path}", module=MODULE)

        try:
            raw = pd.read_csv(
                file_path,
                header=None,
                dtype=str,
                keep_default_na=False,
                encoding="utf-8",
                skipinitialspace=True,
            )
        except pd.errors.EmptyDataError:
            raise SchemaError(f"{file_path} is empty; a header row is required", module=MODULE)
        except (pd.errors.ParserError, UnicodeDecodeError) as e:
            raise CsvParseError(f"cannot read {file_path}: {e}", module=MODULE)

        header = [str(name).strip() for name in raw.iloc[0].tolist()]
        duplicates = sorted({name for name in header if header.count(name) > 1})
        if duplicates:
            raise SchemaError(f"duplicate column names {duplicates}", module=MODULE, column=duplicates[0])

        cells = raw.iloc[1:].reset_index(drop=True)
        cells.columns = header
        return cells

    @staticmethod
    def _parse_column(cells: pd.Series, column: str) -> np.ndarray:
        text = cells.astype(str).str.strip()
        empty = np.flatnonzero((text == "").to_numpy())
        if empty.size:
            raise CsvParseError("missing value", module=MODULE, row=int(empty[0]), column=column)
        values = pd.to_numeric(text, errors="coerce").to_numpy(dtype=float)
        bad = np.flatnonzero(np.isnan(values))
        if bad.size:
            raise CsvParseError(
                f"cannot parse {text.iloc[bad[0]]!r} as a number",
                module=MODULE, row=int(bad[0]), column=column,
            )
        return values

    def load(
        self,
        filename: Union[str, Path],
        schema: SchemaMapping,
        support: OutcomeSupport,
    ) -> Dataset:
        """
        Load and validate a dataset.

        Args:
            filename: CSV path, relative to ``data_dir`` unless absolute
            schema: Column-role mapping
            support: Declared outcome support

        Returns:
            Validated Dataset with row order preserved

        Raises:
            SchemaError: File or mapped column missing, duplicate header
            CsvParseError: Unparseable or missing cell
            DomainError: Invariant violation
        """
        file_path = Path(filename)
        if not file_path.is_absolute():
            file_path = self.data_dir / file_path
        logger.info(f"Loading dataset: {file_path}")

        cells = self._read_cells(file_path)
        missing = [name for name in schema.columns() if name not in cells.columns]
        if missing:
            raise SchemaError(
                f"missing column(s) {missing}; available: {list(cells.columns)}",
                module=MODULE, column=missing[0],
            )

        parsed = pd.DataFrame(
            {name: self._parse_column(cells[name], name) for name in schema.columns()}
        )
        dataset = Dataset.from_frame(parsed, schema, support)
        logger.info(f"Loaded {dataset.n} rows, columns {schema.columns()}")
        return dataset


def load_dataset(
    path: Union[str, Path],
    schema: SchemaMapping,
    support: OutcomeSupport,
) -> Dataset:
    """Load ``path`` with a :class:`DatasetLoader` rooted at the working directory."""
    return DatasetLoader().load(path, schema, support)


__all__ = ['Dataset', 'DatasetLoader', 'load_dataset']
