import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import pandas as pd

from tools.common.errors import ConfigError, SchemaError, TableParseError
from tools.glm.glm_engine import GlmFit, MarginalResult

Z_95 = 1.96

CLOGOR = "clogOR"
MLOGOR = "mlogOR"
MLOGRR = "mlogRR"
MRD = "mRD"
ESTIMANDS = (CLOGOR, MLOGOR, MLOGRR, MRD)
MARGINAL_ESTIMANDS = (MLOGOR, MLOGRR, MRD)

ESTIMATOR_IDS = ("BNMK-C", "BNMK-O", "CC", "CNFD", "IPW", "GR", "MICE",
                 "T-M", "T-MTO", "T-M-a", "T-MTO-a", "T-MTO-r")

RECORD_FIELDS = ("scenario", "replicate", "estimator", "estimand", "point", "ase", "ci_low", "ci_high",
                 "converged", "df")


def validate_estimands(estimands: Sequence[str]) -> tuple[str, ...]:
    unknown = [e for e in estimands if e not in ESTIMANDS]
    if unknown:
        raise ConfigError(f"未知估计目标: {unknown}")
    return tuple(estimands)


def validate_estimators(estimators: Sequence[str]) -> tuple[str, ...]:
    unknown = [e for e in estimators if e not in ESTIMATOR_IDS]
    if unknown:
        raise ConfigError(f"未知估计量: {unknown}")
    return tuple(estimators)


@dataclass(frozen=True)
class EstimateRecord:
    """一个估计量 × 估计目标的结果；未收敛的记录不带点估计"""
    estimator: str
    estimand: str
    point: Optional[float]
    ase: Optional[float]
    ci_low: Optional[float]
    ci_high: Optional[float]
    converged: bool
    replicate: int = 0
    scenario: str = ""
    df: Optional[float] = None

    @classmethod
    def from_point(cls, estimator: str, estimand: str, point: float, ase: float, replicate: int = 0,
                   scenario: str = "", df: Optional[float] = None) -> "EstimateRecord":
        if point is None or ase is None or not (math.isfinite(point) and math.isfinite(ase)):
            return cls.failed(estimator, estimand, replicate, scenario)
        return cls(estimator, estimand, float(point), float(ase), point - Z_95 * ase, point + Z_95 * ase,
                   True, replicate, scenario, df)

    @classmethod
    def failed(cls, estimator: str, estimand: str, replicate: int = 0, scenario: str = "") -> "EstimateRecord":
        return cls(estimator, estimand, None, None, None, None, False, replicate, scenario)

    def to_row(self) -> dict:
        return {name: getattr(self, name) for name in RECORD_FIELDS}

    def as_dict(self) -> dict:
        return asdict(self)


def failed_records(estimator: str, estimands: Sequence[str], replicate: int = 0,
                   scenario: str = "") -> list[EstimateRecord]:
    return [EstimateRecord.failed(estimator, estimand, replicate, scenario) for estimand in estimands]


def records_from_fit(estimator: str, estimands: Sequence[str], fit: GlmFit, marginal: Optional[MarginalResult],
                     treatment: str, replicate: int = 0, scenario: str = "") -> list[EstimateRecord]:
    """条件对数 OR 取处理系数，边际目标取 MarginalResult"""
    if not fit.converged:
        return failed_records(estimator, estimands, replicate, scenario)
    records = []
    for estimand in estimands:
        if estimand == CLOGOR:
            point, ase = fit.coefficient(treatment), fit.standard_error(treatment)
        elif marginal is None or estimand in marginal.undefined:
            point, ase = None, None
        else:
            point, ase = marginal.estimand_values[estimand], marginal.ses[estimand]
        records.append(EstimateRecord.from_point(estimator, estimand, point, ase, replicate, scenario))
    return records


def sort_records(records: Sequence[EstimateRecord]) -> list[EstimateRecord]:
    """输出顺序固定为 (场景, 重复, 估计量, 估计目标) 的声明顺序"""
    estimator_rank = {e: i for i, e in enumerate(ESTIMATOR_IDS)}
    estimand_rank = {e: i for i, e in enumerate(ESTIMANDS)}

    def key(r: EstimateRecord):
        return (r.scenario, r.replicate, estimator_rank.get(r.estimator, len(estimator_rank)),
                estimand_rank.get(r.estimand, len(estimand_rank)))

    return sorted(records, key=key)


def write_records(records: Sequence[EstimateRecord], path: str) -> None:
    frame = pd.DataFrame([r.to_row() for r in records], columns=list(RECORD_FIELDS))
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")


def read_records(path: str) -> list[EstimateRecord]:
    try:
        frame = pd.read_csv(path, keep_default_na=True)
    except (OSError, pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise TableParseError(f"无法读取估计记录 {path}: {e}")
    missing = [name for name in RECORD_FIELDS if name not in frame.columns]
    if missing:
        raise SchemaError(f"估计记录缺少列: {missing}")

    def value(x):
        return None if pd.isna(x) else float(x)

    records = []
    for row in frame.itertuples(index=False):
        records.append(EstimateRecord(
            estimator=str(row.estimator), estimand=str(row.estimand),
            point=value(row.point), ase=value(row.ase), ci_low=value(row.ci_low), ci_high=value(row.ci_high),
            converged=str(row.converged).lower() == "true", replicate=int(row.replicate),
            scenario="" if pd.isna(row.scenario) else str(row.scenario), df=value(row.df),
        ))
    return records
