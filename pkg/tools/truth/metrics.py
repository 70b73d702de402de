import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from tools.common.errors import SchemaError, TableParseError, UsageError
from tools.estimators.records import Z_95, EstimateRecord
from tools.truth.truth_engine import TruthValue

_logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SummaryRow:
    """一个 (场景, 估计量, 估计目标, 真值类型) 的表现指标；无收敛记录时指标为空"""
    scenario: str
    estimator: str
    estimand: str
    flavor: str
    truth: float
    replicates: int
    converged: int
    convergence_rate: float
    median_bias: Optional[float] = None
    median_pct_bias: Optional[float] = None
    mean_bias: Optional[float] = None
    ese: Optional[float] = None
    mad: Optional[float] = None
    rrmse: Optional[float] = None
    nominal_coverage: Optional[float] = None
    oracle_coverage: Optional[float] = None
    mean_ase: Optional[float] = None

    @property
    def is_plasmode(self) -> bool:
        return self.scenario.startswith("plasmode-")

    @property
    def headline_bias(self) -> Optional[float]:
        """plasmode 真值接近 0，报告偏差；合成场景报告百分比偏差"""
        return self.median_bias if self.is_plasmode else self.median_pct_bias


SUMMARY_FIELDS = tuple(f.name for f in fields(SummaryRow))


def _sorted_mean(values: np.ndarray) -> float:
    return float(np.sum(np.sort(values)) / len(values))


def summarize(records: Sequence[EstimateRecord], truth: TruthValue) -> SummaryRow:
    """汇总同一估计量、同一估计目标的各次重复

    Args:
        records: 估计记录（含未收敛的）
        truth: 与估计目标一致的真值

    Returns:
        SummaryRow；指标只用收敛的记录，与记录顺序无关
    """
    if not records:
        raise UsageError("没有可汇总的记录")
    estimators = {r.estimator for r in records}
    estimands = {r.estimand for r in records}
    if len(estimators) != 1 or len(estimands) != 1:
        raise UsageError(f"汇总的记录必须属于同一估计量和估计目标: {sorted(estimators)} {sorted(estimands)}")
    estimand = estimands.pop()
    if estimand != truth.estimand:
        raise UsageError(f"真值的估计目标 {truth.estimand} 与记录 {estimand} 不一致")

    converged = [r for r in records if r.converged]
    scenario = records[0].scenario or truth.scenario
    base = dict(scenario=scenario, estimator=estimators.pop(), estimand=estimand, flavor=truth.flavor,
                truth=truth.value, replicates=len(records), converged=len(converged),
                convergence_rate=len(converged) / len(records))
    if not converged:
        _logger.warning("%s %s 没有收敛的记录", base["estimator"], estimand)
        return SummaryRow(**base)

    points = np.sort(np.array([r.point for r in converged], dtype=float))
    ases = np.array([r.ase for r in converged], dtype=float)
    bias = points - truth.value
    median_bias = float(np.median(bias))
    median_pct_bias = 100.0 * median_bias / truth.value if truth.value != 0 else None
    mad = float(np.median(np.abs(points - np.median(points))))
    # points 已排序，结果与记录顺序无关
    ese = float(np.std(points, ddof=1)) if len(points) > 1 else None
    nominal = float(np.mean([r.ci_low <= truth.value <= r.ci_high for r in converged]))
    oracle = float(np.mean(np.abs(bias) <= Z_95 * ese)) if ese is not None else None

    return SummaryRow(
        **base,
        median_bias=median_bias,
        median_pct_bias=median_pct_bias,
        mean_bias=_sorted_mean(bias),
        ese=ese,
        mad=mad,
        rrmse=math.sqrt(median_bias ** 2 + mad ** 2),
        nominal_coverage=nominal,
        oracle_coverage=oracle,
        mean_ase=_sorted_mean(ases),
    )


def group_records(records: Sequence[EstimateRecord]) -> dict[tuple[str, str, str], list[EstimateRecord]]:
    """按 (场景, 估计量, 估计目标) 分组"""
    groups: dict[tuple[str, str, str], list[EstimateRecord]] = defaultdict(list)
    for record in records:
        groups[(record.scenario, record.estimator, record.estimand)].append(record)
    return dict(groups)


def summarize_all(records: Sequence[EstimateRecord],
                  truths: Mapping[tuple[str, str, str], TruthValue]) -> list[SummaryRow]:
    """truths 的键为 (场景, 估计目标, 真值类型)；缺真值的组跳过"""
    rows = []
    for (scenario, estimator, estimand), group in group_records(records).items():
        for (t_scenario, t_estimand, _), truth in sorted(truths.items()):
            if t_scenario == scenario and t_estimand == estimand:
                rows.append(summarize(group, truth))
    return rows


def write_summaries(rows: Sequence[SummaryRow], path: str) -> None:
    frame = pd.DataFrame([asdict(row) for row in rows], columns=list(SUMMARY_FIELDS))
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")


def read_summaries(path: str) -> list[SummaryRow]:
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        return []
    except (OSError, pd.errors.ParserError) as e:
        raise TableParseError(f"无法读取汇总表 {path}: {e}")
    missing = [name for name in SUMMARY_FIELDS if name not in frame.columns]
    if missing:
        raise SchemaError(f"汇总表缺少列: {missing}")
    rows = []
    for record in frame.to_dict(orient="records"):
        values = {name: (None if isinstance(value, float) and math.isnan(value) else value)
                  for name, value in record.items() if name in SUMMARY_FIELDS}
        for name in ("scenario", "estimator", "estimand", "flavor"):
            values[name] = str(values[name])
        for name in ("replicates", "converged"):
            values[name] = int(values[name])
        rows.append(SummaryRow(**values))
    return rows
