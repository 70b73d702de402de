from dataclasses import dataclass


@dataclass(frozen=True)
class WorkingModelSpec:
    """固定的分析模型公式"""
    outcome: tuple[str, ...]
    missingness: tuple[str, ...]
    propensity: tuple[str, ...]
    confounders: tuple[str, ...]
    treatment: str = "X"
    response: str = "Y"
    indicator: str = "R"

    @property
    def confounded_outcome(self) -> tuple[str, ...]:
        """去掉部分观测混杂变量后的结局模型"""
        return tuple(term for term in self.outcome if not any(w in term for w in self.confounders))

    @property
    def outcome_covariates(self) -> tuple[str, ...]:
        return tuple(term for term in self.outcome if term != self.treatment)


SYNTHETIC_WORKING_MODEL = WorkingModelSpec(
    outcome=("X", "Z_s", "Z_w", "W_s", "W_w"),
    missingness=("Y", "X", "Z_s", "Z_w"),
    propensity=("Z_s", "Z_w", "W_s", "W_w"),
    confounders=("W_s", "W_w"),
)

# plasmode 分析模型：主效应，年龄只进入一次项
PLASMODE_WORKING_MODEL = WorkingModelSpec(
    outcome=("X", "female", "age10", "charlson", "anxiety", "alcohol", "self_harm", "mh_hosp", "phq8", "phq9"),
    missingness=("Y", "X", "female", "age10", "charlson", "anxiety", "alcohol", "self_harm", "mh_hosp"),
    propensity=("female", "age10", "charlson", "anxiety", "alcohol", "self_harm", "mh_hosp", "phq8", "phq9"),
    confounders=("phq8", "phq9"),
)
