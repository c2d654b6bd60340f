"""Dataset generation, CSV ingestion and Adult Income preprocessing."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .nnkit import DenseNet, Layer

XY_COLUMNS = ["x", "2x", "x^2", "y", "2y", "y^2", "c", "2c", "c^2"]
XY_FAMILIES = {"x": XY_COLUMNS[0:3], "y": XY_COLUMNS[3:6], "c": XY_COLUMNS[6:9]}

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education_num", "marital_status",
    "occupation", "relationship", "race", "sex", "capital_gain", "capital_loss",
    "hours_per_week", "native_country", "income",
]
ADULT_NUMERIC = ["age", "fnlwgt", "education_num", "capital_gain", "capital_loss", "hours_per_week"]
ADULT_SCHEMA = {c: ("numeric" if c in ADULT_NUMERIC else "categorical") for c in ADULT_COLUMNS}
RARE_VALUE = "rare_value"
MISSING_TOKENS = ("?",)


@dataclass
class TabularDataset:
    """Feature matrix with named columns, labels and a train/test tag per row.

    ``kinds`` holds ``"numeric"`` or ``"one_hot:<group>"`` per column.
    """

    feature_names: List[str]
    values: np.ndarray
    labels: np.ndarray
    kinds: List[str] = None
    task: str = "regression"
    split: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        n, d = self.values.shape
        if len(self.feature_names) != d:
            raise ValueError("feature_names must match the number of columns")
        if len(set(self.feature_names)) != d:
            raise ValueError("column names must be unique")
        if self.labels.shape[0] != n:
            raise ValueError("label length must equal the row count")
        if self.kinds is None:
            self.kinds = ["numeric"] * d
        if self.split is None:
            self.split = np.array(["train"] * n)
        self.split = np.asarray(self.split).astype(str)
        if self.task not in ("regression", "binary_classification"):
            raise ValueError(f"unknown task {self.task!r}")
        for group, cols in self.one_hot_groups().items():
            sums = self.values[:, cols].sum(axis=1)
            if not np.all(sums == 1.0):
                raise ValueError(f"one-hot group {group!r} does not sum to 1 on every row")

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def column_index(self, name) -> int:
        if isinstance(name, (int, np.integer)):
            if not 0 <= name < self.n_features:
                raise KeyError(f"column index {name} out of range")
            return int(name)
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise KeyError(f"unknown column {name!r}") from None

    def column(self, name) -> np.ndarray:
        return self.values[:, self.column_index(name)]

    def one_hot_groups(self) -> Dict[str, List[int]]:
        groups: Dict[str, List[int]] = {}
        for i, kind in enumerate(self.kinds):
            if kind.startswith("one_hot:"):
                groups.setdefault(kind.split(":", 1)[1], []).append(i)
        return groups

    def is_binary(self, name) -> bool:
        col = self.column(name)
        return bool(np.all((col == 0.0) | (col == 1.0)))

    def subset(self, which: str) -> "TabularDataset":
        mask = self.split == which
        return TabularDataset(list(self.feature_names), self.values[mask], self.labels[mask],
                              list(self.kinds), self.task, self.split[mask])

    @property
    def train(self) -> "TabularDataset":
        return self.subset("train")

    @property
    def test(self) -> "TabularDataset":
        return self.subset("test")

    # -- persistence ---------------------------------------------------
    def save(self, directory) -> None:
        """Write ``train.csv``, ``test.csv`` and ``dataset.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for part in ("train", "test"):
            sub = self.subset(part)
            write_csv(directory / f"{part}.csv", [*self.feature_names, "label"],
                      np.column_stack([sub.values, sub.labels]))
        meta = {"feature_names": self.feature_names, "kinds": self.kinds, "task": self.task}
        (directory / "dataset.json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "TabularDataset":
        directory = Path(directory)
        meta = json.loads((directory / "dataset.json").read_text())
        parts, splits = [], []
        for part in ("train", "test"):
            path = directory / f"{part}.csv"
            if not path.exists():
                continue
            table = load_csv(path, {c: "numeric" for c in [*meta["feature_names"], "label"]})
            parts.append(table)
            splits.extend([part] * len(table))
        table = pd.concat(parts, ignore_index=True)
        return cls(meta["feature_names"], table[meta["feature_names"]].to_numpy(),
                   table["label"].to_numpy(), meta["kinds"], meta["task"], np.array(splits))


def gen_xy_synthetic(n: int = 5000, seed: int = 0, test_fraction: float = 0.2) -> TabularDataset:
    """The x + y regression data with proxies ``2v`` and ``v^2`` and a noise family c.

    The last ``round(n * test_fraction)`` rows are tagged as the test split.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.0, 1.0, size=(n, 3))
    cols = []
    for k in range(3):
        v = base[:, k]
        cols.extend([v, 2.0 * v, v * v])
    values = np.column_stack(cols)
    labels = base[:, 0] + base[:, 1]
    n_test = int(round(n * test_fraction))
    split = np.array(["train"] * (n - n_test) + ["test"] * n_test)
    return TabularDataset(list(XY_COLUMNS), values, labels, task="regression", split=split)


def xy_fixed_model() -> DenseNet:
    """Single linear layer with weight 1 on x and y and 0 elsewhere."""
    w = np.zeros((len(XY_COLUMNS), 1))
    w[XY_COLUMNS.index("x"), 0] = 1.0
    w[XY_COLUMNS.index("y"), 0] = 1.0
    return DenseNet([Layer(w, np.zeros(1), "linear")])


def gen_planted_proxy(n: int = 4000, seed: int = 0, noise: float = 0.05,
                      test_fraction: float = 0.2) -> TabularDataset:
    """Three uniform columns ``A``, ``B = A + noise`` and independent ``C``.

    Used with :func:`planted_proxy_model`, which reads only ``B``; ``A`` then has
    no direct influence but strong indirect influence through ``B``.
    """
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.0, 1.0, n)
    b = a + rng.normal(0.0, noise, n)
    c = rng.uniform(0.0, 1.0, n)
    n_test = int(round(n * test_fraction))
    split = np.array(["train"] * (n - n_test) + ["test"] * n_test)
    return TabularDataset(["A", "B", "C"], np.column_stack([a, b, c]), b, split=split)


def planted_proxy_model() -> DenseNet:
    return DenseNet([Layer([[0.0], [1.0], [0.0]], [0.0], "linear")])


# -- CSV ----------------------------------------------------------------

def write_csv(path, header: Sequence[str], rows: np.ndarray) -> None:
    """Write a numeric table with a header; floats use ``repr`` so reloads are exact."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.asarray(rows, dtype=np.float64):
            w.writerow([repr(float(v)) for v in row])


def load_csv(path, schema: Optional[Dict[str, str]] = None,
             names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Read a CSV into a typed table.

    ``schema`` maps column name to ``"numeric"`` or ``"categorical"``; columns
    absent from it are categorical. When ``names`` is given the file has no
    header row and these names are used instead. Lines starting with ``|``
    (UCI comment lines) and blank lines are skipped. Categorical values are
    stripped of surrounding whitespace; missing-value tokens (``?``) are kept as
    ordinary values and counted in ``df.attrs["missing"]``.
    """
    path = Path(path)
    schema = dict(schema or {})
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(i, row) for i, row in enumerate(csv.reader(fh, skipinitialspace=True), start=1)
                if row and any(cell.strip() for cell in row) and not row[0].startswith("|")]
    if names is None:
        if not rows:
            raise ValueError(f"{path}: empty file")
        header = [h.strip() for h in rows[0][1]]
        rows = rows[1:]
    else:
        header = list(names)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    unknown = set(schema) - set(header)
    if unknown:
        raise ValueError(f"{path}: unknown columns in schema: {sorted(unknown)}")
    columns: Dict[str, list] = {h: [] for h in header}
    missing: Dict[str, int] = {}
    for lineno, row in rows:
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        for h, cell in zip(header, row):
            cell = cell.strip()
            if cell in MISSING_TOKENS:
                missing[h] = missing.get(h, 0) + 1
            if schema.get(h) == "numeric":
                try:
                    columns[h].append(float(cell))
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: column {h!r} is not numeric: {cell!r}") from None
            else:
                columns[h].append(cell)
    df = pd.DataFrame({h: (np.array(v, dtype=np.float64) if schema.get(h) == "numeric"
                           else np.array(v, dtype=object)) for h, v in columns.items()})
    df.attrs["missing"] = missing
    return df


def load_adult_raw(path) -> pd.DataFrame:
    """Load a canonical UCI ``adult.data`` / ``adult.test`` file."""
    df = load_csv(path, ADULT_SCHEMA, names=ADULT_COLUMNS)
    df["income"] = df["income"].str.rstrip(".")
    return df


# -- Adult preprocessing --------------------------------------------------

@dataclass
class PreprocessReport:
    dropped: List[str]
    numeric_stats: Dict[str, List[float]]  # column -> [mean, std]
    categories: Dict[str, List[str]]  # kept values per categorical column, in order
    rare_binned: Dict[str, List[str]]
    columns: List[str]
    kinds: List[str]
    label_column: str = "income"
    positive_label: str = ">50K"
    rare_threshold: int = 1000

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d) -> "PreprocessReport":
        return cls(**d)

    def transform(self, raw: pd.DataFrame) -> np.ndarray:
        """Replay the preprocessing on new raw rows."""
        blocks = []
        for col, kind in zip(self.columns, self.kinds):
            if kind == "numeric":
                mean, std = self.numeric_stats[col]
                blocks.append((raw[col].to_numpy(dtype=np.float64) - mean) / std)
            else:
                group = kind.split(":", 1)[1]
                value = col[len(group) + 1:]
                kept = set(self.categories[group])
                cleaned = np.array([v if v in kept else RARE_VALUE for v in raw[group]], dtype=object)
                blocks.append((cleaned == value).astype(np.float64))
        return np.column_stack(blocks)

    def labels(self, raw: pd.DataFrame) -> np.ndarray:
        return (raw[self.label_column].to_numpy() == self.positive_label).astype(np.float64)


def preprocess_adult(raw_train: pd.DataFrame, raw_test: pd.DataFrame,
                     rare_threshold: int = 1000):
    """One-hot encode categoricals (rare values binned), standardize numerics.

    ``education_num`` is dropped. All statistics come from the training split.
    Returns ``(dataset, report)``.
    """
    if list(raw_train.columns) != list(raw_test.columns):
        raise ValueError("train and test tables must share columns")
    dropped = ["education_num"]
    numeric_stats, categories, rare_binned = {}, {}, {}
    columns, kinds = [], []
    for col in raw_train.columns:
        if col in dropped or col == "income":
            continue
        if ADULT_SCHEMA.get(col) == "numeric":
            v = raw_train[col].to_numpy(dtype=np.float64)
            numeric_stats[col] = [float(v.mean()), float(v.std())]
            columns.append(col)
            kinds.append("numeric")
            continue
        counts = raw_train[col].value_counts()
        common = sorted(str(k) for k, c in counts.items() if c >= rare_threshold)
        rare = sorted(str(k) for k, c in counts.items() if c < rare_threshold)
        values = common + ([RARE_VALUE] if rare else [])
        if len(values) < 2:
            raise ValueError(f"categorical column {col!r} collapses to a single value")
        categories[col] = common
        rare_binned[col] = rare
        for value in values:
            columns.append(f"{col}_{value}")
            kinds.append(f"one_hot:{col}")
    report = PreprocessReport(dropped, numeric_stats, categories, rare_binned, columns, kinds,
                              rare_threshold=rare_threshold)
    values = np.vstack([report.transform(raw_train), report.transform(raw_test)])
    labels = np.concatenate([report.labels(raw_train), report.labels(raw_test)])
    split = np.array(["train"] * len(raw_train) + ["test"] * len(raw_test))
    data = TabularDataset(columns, values, labels, kinds, "binary_classification", split)
    return data, report
