import logging
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from itertools import product
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from tools.common.errors import MissingDataError, SchemaError, TableParseError

_logger = logging.getLogger(__name__)

MISSING_TOKEN = "NA"
INTERCEPT_LABEL = "(Intercept)"


class ColumnKind(str, Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"
    CATEGORICAL = "categorical"


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: ColumnKind
    levels: tuple[str, ...] = ()

    @classmethod
    def parse(cls, name: str, declaration: Any) -> "ColumnSpec":
        """解析列类型声明

        支持: ColumnSpec、"continuous"、"binary"、"categorical:0|1|2|3+"、
        {"kind": "categorical", "levels": [...]}
        """
        if isinstance(declaration, ColumnSpec):
            return declaration
        levels: Sequence[str] = ()
        if isinstance(declaration, Mapping):
            kind_text = str(declaration.get("kind", ""))
            levels = [str(level) for level in declaration.get("levels", ())]
        else:
            kind_text = str(declaration)
            if ":" in kind_text:
                kind_text, level_text = kind_text.split(":", 1)
                levels = [level for level in level_text.split("|") if level]
        try:
            kind = ColumnKind(kind_text.strip().lower())
        except ValueError:
            raise SchemaError(f"未知列类型: {name}={declaration!r}")
        if kind is ColumnKind.CATEGORICAL and len(levels) < 2:
            raise SchemaError(f"分类列至少需要两个水平: {name}")
        if kind is not ColumnKind.CATEGORICAL and levels:
            raise SchemaError(f"只有分类列可以声明水平: {name}")
        return cls(name=name, kind=kind, levels=tuple(levels))


def continuous(name: str) -> ColumnSpec:
    return ColumnSpec(name, ColumnKind.CONTINUOUS)


def binary(name: str) -> ColumnSpec:
    return ColumnSpec(name, ColumnKind.BINARY)


def categorical(name: str, levels: Sequence[str]) -> ColumnSpec:
    return ColumnSpec(name, ColumnKind.CATEGORICAL, tuple(str(level) for level in levels))


@dataclass(frozen=True)
class MissingMask:
    """按列的缺失标记（只读视图）"""
    bits: Mapping[str, np.ndarray]

    def count(self, name: str) -> int:
        return int(self.bits[name].sum())

    def any(self) -> bool:
        return any(bool(bits.any()) for bits in self.bits.values())

    def incomplete_columns(self) -> list[str]:
        return [name for name, bits in self.bits.items() if bits.any()]


@dataclass(frozen=True, eq=False)
class Dataset:
    """带缺失标记的矩形数据表

    values 按行存储（分类列存水平编号），缺失单元格为 NaN 且 mask 为 True。
    构造后不可修改。
    """
    columns: tuple[ColumnSpec, ...]
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        columns = tuple(self.columns)
        k = len(columns)
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim == 1 and k == 1:
            values = values.reshape(-1, 1)
        if values.size == 0:
            values = values.reshape(-1, k) if k else values.reshape(values.shape[0] if values.ndim else 0, 0)
        if values.ndim != 2 or values.shape[1] != k:
            raise SchemaError(f"数据维度与列数不一致: {values.shape} vs {k}")
        mask = np.array(self.mask, dtype=bool, copy=True).reshape(values.shape)

        names = [spec.name for spec in columns]
        if len(set(names)) != len(names):
            raise SchemaError(f"列名重复: {names}")

        values[mask] = np.nan
        for j, spec in enumerate(columns):
            observed = values[~mask[:, j], j]
            if not np.all(np.isfinite(observed)):
                raise SchemaError(f"列 {spec.name} 含有未标记缺失的非有限值")
            if spec.kind is ColumnKind.BINARY and not np.isin(observed, (0.0, 1.0)).all():
                raise SchemaError(f"二值列 {spec.name} 只能取 0/1")
            if spec.kind is ColumnKind.CATEGORICAL:
                valid = (observed == np.round(observed)) & (observed >= 0) & (observed < len(spec.levels))
                if not valid.all():
                    raise SchemaError(f"分类列 {spec.name} 含有无效的水平编号")

        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "columns", columns)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "_index", {name: j for j, name in enumerate(names)})

    @classmethod
    def from_columns(cls, specs: Sequence[ColumnSpec], data: Mapping[str, Any],
                     missing: Optional[Mapping[str, Any]] = None) -> "Dataset":
        """按列构造；missing 给出各列的缺失标记（缺省时以 NaN 判断）"""
        specs = tuple(specs)
        if not specs:
            return cls((), np.empty((0, 0)), np.empty((0, 0), dtype=bool))
        arrays = [np.asarray(data[spec.name], dtype=float).reshape(-1) for spec in specs]
        n = len(arrays[0])
        if any(len(array) != n for array in arrays):
            raise SchemaError("各列长度不一致")
        values = np.column_stack(arrays) if n else np.empty((0, len(specs)))
        mask = np.isnan(values)
        for j, spec in enumerate(specs):
            if missing is not None and spec.name in missing:
                mask[:, j] |= np.asarray(missing[spec.name], dtype=bool)
        return cls(specs, values, mask)

    @classmethod
    def concat(cls, datasets: Sequence["Dataset"]) -> "Dataset":
        first = datasets[0]
        for other in datasets[1:]:
            if other.columns != first.columns:
                raise SchemaError("拼接的数据表列定义不一致")
        return cls(first.columns,
                   np.vstack([d.values for d in datasets]),
                   np.vstack([d.mask for d in datasets]))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def names(self) -> list[str]:
        return [spec.name for spec in self.columns]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise SchemaError(f"数据表中不存在列: {name}")

    def spec(self, name: str) -> ColumnSpec:
        return self.columns[self.index(name)]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.index(name)].copy()

    def is_missing(self, name: str) -> np.ndarray:
        return self.mask[:, self.index(name)].copy()

    def mask_count(self, name: str) -> int:
        return int(self.mask[:, self.index(name)].sum())

    def missing_mask(self) -> MissingMask:
        return MissingMask({spec.name: self.mask[:, j].copy() for j, spec in enumerate(self.columns)})

    def has_missing(self, names: Optional[Iterable[str]] = None) -> bool:
        if names is None:
            return bool(self.mask.any())
        return any(self.mask[:, self.index(name)].any() for name in names)

    def with_column(self, spec: ColumnSpec, values: Any, missing: Any = None) -> "Dataset":
        """追加列；同名列则原位替换"""
        column = np.broadcast_to(np.asarray(values, dtype=float), (self.n_rows,)).copy()
        column_mask = np.isnan(column) if missing is None else np.asarray(missing, dtype=bool).copy()
        columns = list(self.columns)
        values_out = self.values.copy()
        mask_out = self.mask.copy()
        if spec.name in self._index:
            j = self._index[spec.name]
            columns[j] = spec
            values_out[:, j] = column
            mask_out[:, j] = column_mask
        else:
            columns.append(spec)
            values_out = np.column_stack([values_out, column]) if self.columns else column.reshape(-1, 1)
            mask_out = np.column_stack([mask_out, column_mask]) if self.columns else column_mask.reshape(-1, 1)
        return Dataset(tuple(columns), values_out, mask_out)

    def replace_values(self, name: str, values: Any) -> "Dataset":
        """替换某列取值（例如反事实地把处理设为 1），保留列类型"""
        return self.with_column(self.spec(name), values)

    def fill_missing(self, name: str, values: Any) -> "Dataset":
        """按行顺序填补某列的缺失单元格，观测值保持不变"""
        j = self.index(name)
        rows = self.mask[:, j]
        fill = np.asarray(values, dtype=float).reshape(-1)
        if fill.size != int(rows.sum()):
            raise SchemaError(f"填补值个数与缺失个数不一致: {name}")
        values_out = self.values.copy()
        mask_out = self.mask.copy()
        values_out[rows, j] = fill
        mask_out[rows, j] = False
        return Dataset(self.columns, values_out, mask_out)

    def drop(self, names: Iterable[str]) -> "Dataset":
        names = set(names)
        keep = [j for j, spec in enumerate(self.columns) if spec.name not in names]
        return Dataset(tuple(self.columns[j] for j in keep), self.values[:, keep], self.mask[:, keep])

    def select(self, names: Sequence[str]) -> "Dataset":
        idx = [self.index(name) for name in names]
        return Dataset(tuple(self.columns[j] for j in idx), self.values[:, idx], self.mask[:, idx])

    def take(self, rows: Any) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.columns, self.values[rows], self.mask[rows])

    def to_frame(self) -> pd.DataFrame:
        """转为 DataFrame（分类列为水平标签，缺失为 NaN/None）"""
        data = {}
        for j, spec in enumerate(self.columns):
            column = self.values[:, j]
            if spec.kind is ColumnKind.CATEGORICAL:
                data[spec.name] = [None if np.isnan(v) else spec.levels[int(v)] for v in column]
            else:
                data[spec.name] = column
        return pd.DataFrame(data, columns=self.names)


def load_table(path: str, schema: Mapping[str, Any]) -> Dataset:
    """读取逗号分隔表格

    Args:
        path: 文件路径（UTF-8，首行为表头，缺失记为 NA）
        schema: 列名到列类型声明的映射

    Returns:
        Dataset，列顺序与文件一致
    """
    try:
        frame = pd.read_csv(path, dtype=str, na_filter=False, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise TableParseError(f"表格缺少表头: {path}")
    except pd.errors.ParserError as e:
        raise TableParseError(f"表格行字段数不一致: {e}")

    for name in schema:
        if name not in frame.columns:
            raise SchemaError(f"表格中缺少已声明的列: {name}")
    specs = []
    for name in frame.columns:
        if name not in schema:
            raise SchemaError(f"表格含有未声明类型的列: {name}")
        specs.append(ColumnSpec.parse(name, schema[name]))

    # 字段不足的行在 na_filter=False 时会出现 NaN
    ragged = frame.isna().any(axis=1).to_numpy()
    if ragged.any():
        row = int(np.flatnonzero(ragged)[0]) + 2
        raise TableParseError(f"第{row}行字段数不足")

    data: dict[str, np.ndarray] = {}
    missing: dict[str, np.ndarray] = {}
    for spec in specs:
        cells = frame[spec.name]
        is_na = (cells == MISSING_TOKEN).to_numpy()
        if spec.kind is ColumnKind.CATEGORICAL:
            lookup = {level: float(i) for i, level in enumerate(spec.levels)}
            parsed = cells.map(lookup).to_numpy(dtype=float)
        else:
            parsed = pd.to_numeric(cells.where(~is_na), errors="coerce").to_numpy(dtype=float)
        bad = np.isnan(parsed) & ~is_na
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise TableParseError(f"第{row + 2}行 列{spec.name} 无法解析: {cells.iloc[row]!r}")
        parsed[is_na] = np.nan
        data[spec.name] = parsed
        missing[spec.name] = is_na

    if not specs:
        return Dataset((), np.empty((0, 0)), np.empty((0, 0), dtype=bool))
    if len(frame) == 0:
        return Dataset(tuple(specs), np.empty((0, len(specs))), np.empty((0, len(specs)), dtype=bool))
    return Dataset.from_columns(specs, data, missing)


def _format_cell(spec: ColumnSpec, value: float) -> str:
    if np.isnan(value):
        return MISSING_TOKEN
    if spec.kind is ColumnKind.CATEGORICAL:
        return spec.levels[int(value)]
    if spec.kind is ColumnKind.BINARY:
        return str(int(value))
    return format(value, ".17g")


def write_table(d: Dataset, path: str) -> None:
    """写出逗号分隔表格（17位有效数字，缺失写 NA）"""
    frame = pd.DataFrame(
        {spec.name: [_format_cell(spec, v) for v in d.values[:, j]] for j, spec in enumerate(d.columns)},
        columns=d.names,
    )
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")


def complete_case_filter(d: Dataset, indicator: str) -> Dataset:
    """只保留 indicator == 1 的完整观测"""
    spec = d.spec(indicator)
    if spec.kind is not ColumnKind.BINARY:
        raise SchemaError(f"完整观测指示列必须是二值列: {indicator}")
    if d.mask_count(indicator):
        raise MissingDataError(f"完整观测指示列不能有缺失: {indicator}")
    kept = d.take(d.column(indicator) == 1)
    if kept.has_missing():
        incomplete = kept.missing_mask().incomplete_columns()
        raise MissingDataError(f"完整观测中仍有缺失单元格: {incomplete}")
    return kept


# ---- 模型公式 ----

_INDICATOR = re.compile(
    r"^I\(\s*([A-Za-z_][\w\.]*)\s*(<=|>=|<|>)\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*\)$"
)
_COMPARE = {"<": np.less, ">": np.greater, "<=": np.less_equal, ">=": np.greater_equal}


@lru_cache(maxsize=None)
def _parse_term(term: str) -> tuple[tuple[str, ...], ...]:
    """把一项拆为因子：("col",) 或 ("col", op, 常数)"""
    factors = []
    for raw in re.split(r"[*:]", term):
        factor = raw.strip()
        match = _INDICATOR.match(factor)
        if match:
            factors.append((match.group(1), match.group(2), match.group(3)))
        elif re.fullmatch(r"[A-Za-z_][\w\.]*", factor):
            factors.append((factor,))
        else:
            raise SchemaError(f"无法解析的模型项: {term!r}")
    return tuple(factors)


def formula_columns(formula: Sequence[str]) -> list[str]:
    """公式引用到的列（按首次出现顺序）"""
    seen: dict[str, None] = {}
    for term in formula:
        for factor in _parse_term(term):
            seen.setdefault(factor[0], None)
    return list(seen)


def _factor_columns(d: Dataset, factor: tuple[str, ...]) -> list[tuple[str, np.ndarray]]:
    name = factor[0]
    spec = d.spec(name)
    values = d.values[:, d.index(name)]
    if len(factor) == 3:
        _, op, constant = factor
        if spec.kind is ColumnKind.CATEGORICAL:
            raise SchemaError(f"分类列不能用于阈值指示: {name}")
        return [(f"I({name}{op}{constant})", _COMPARE[op](values, float(constant)).astype(float))]
    if spec.kind is ColumnKind.CATEGORICAL:
        # 参照编码：第一个水平为参照
        return [(f"{name}[{level}]", (values == j).astype(float)) for j, level in enumerate(spec.levels) if j > 0]
    return [(name, values)]


def _expand(d: Dataset, formula: Sequence[str]) -> list[tuple[str, np.ndarray]]:
    referenced = formula_columns(formula)
    for name in referenced:
        if d.mask_count(name):
            raise MissingDataError(f"模型引用的列存在缺失，请先筛选或填补: {name}")
    expanded: list[tuple[str, np.ndarray]] = []
    for term in formula:
        pieces = [_factor_columns(d, factor) for factor in _parse_term(term)]
        for combination in product(*pieces):
            label = ":".join(label for label, _ in combination)
            column = np.ones(d.n_rows)
            for _, values in combination:
                column = column * values
            expanded.append((label, column))
    return expanded


def design_matrix(d: Dataset, formula: Sequence[str]) -> np.ndarray:
    """构造设计矩阵（首列为截距，列顺序与公式一致）"""
    columns = [np.ones(d.n_rows)] + [values for _, values in _expand(d, formula)]
    return np.column_stack(columns)


def design_labels(d: Dataset, formula: Sequence[str]) -> list[str]:
    return [INTERCEPT_LABEL] + [label for label, _ in _expand(d, formula)]
