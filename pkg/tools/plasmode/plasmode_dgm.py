import logging
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Optional, Sequence

import numpy as np
import yaml
from dotenv import dotenv_values
from scipy.special import expit

from tools.common.errors import ConfigError, SchemaError, UnknownScenarioError
from tools.common.settings import PLASMODE_MODELS_PATH, TEMPLATES_DIR
from tools.synthetic.generator import ScenarioDraw
from tools.tabular.dataset import Dataset, binary, categorical, continuous, design_labels, design_matrix

_logger = logging.getLogger(__name__)

COHORT_CONFIG_PATH = os.path.join(TEMPLATES_DIR, "plasmode", "cohort.yaml")

MODEL_NAMES = ("missing_phq", "treatment", "outcome_5yr", "outcome_1yr")
OUTCOMES = {"1yr": "outcome_1yr", "5yr": "outcome_5yr"}
PHQ_COLUMNS = ("phq8", "phq9")

# 数据生成模型的项（主效应、年龄平方与表中列出的交互）
COVARIATE_TERMS = (
    "female", "age10", "age10*age10", "charlson", "anxiety", "alcohol", "self_harm", "mh_hosp",
    "phq8", "phq9", "charlson*anxiety", "age10*female", "female*self_harm", "age10*self_harm",
    "charlson*age10", "phq9*female", "phq9*self_harm",
)
MODEL_FORMULAS = {
    "missing_phq": ("X",) + COVARIATE_TERMS,
    "treatment": COVARIATE_TERMS,
    "outcome_5yr": ("X",) + COVARIATE_TERMS,
    "outcome_1yr": ("X",) + COVARIATE_TERMS,
}
ANALYSIS_COLUMNS = ("Y", "X", "R", "female", "age10", "charlson", "anxiety", "alcohol", "self_harm",
                    "mh_hosp", "phq8", "phq9")


@lru_cache(maxsize=None)
def cohort_config(path: str = COHORT_CONFIG_PATH) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return yaml.safe_load(f)


def cohort_columns(config: Optional[Mapping] = None):
    config = config or cohort_config()
    return (
        binary("female"),
        continuous("age"),
        continuous("age10"),
        categorical("charlson", config["charlson"]["levels"]),
        binary("anxiety"),
        binary("alcohol"),
        binary("self_harm"),
        binary("mh_hosp"),
        categorical("phq8", config["phq8"]["levels"]),
        categorical("phq9", config["phq9"]["levels"]),
    )


def _shares(values: Sequence[float]) -> np.ndarray:
    shares = np.asarray(values, dtype=float)
    return shares / shares.sum()


def synth_cohort(n: int, rng: np.random.Generator, config: Optional[Mapping] = None) -> Dataset:
    """替身队列：各协变量按公布的边际分布独立抽取，年龄在区间内均匀"""
    if n < 1:
        raise ConfigError(f"队列规模至少为 1: {n}")
    config = config or cohort_config()
    bands = config["age_bands"]
    band = rng.choice(len(bands), size=n, p=_shares([b["share"] for b in bands]))
    low = np.array([b["low"] for b in bands], dtype=float)[band]
    high = np.array([b["high"] for b in bands], dtype=float)[band]
    age = low + (high - low) * rng.random(n)

    data = {
        "female": rng.random(n) < config["female"],
        "age": age,
        "age10": age / 10.0,
        "charlson": rng.choice(len(config["charlson"]["levels"]), size=n, p=_shares(config["charlson"]["shares"])),
        "anxiety": rng.random(n) < config["anxiety"],
        "alcohol": rng.random(n) < config["alcohol"],
        "self_harm": rng.random(n) < config["self_harm"],
        "mh_hosp": rng.random(n) < config["mh_hosp"],
        "phq8": rng.choice(len(config["phq8"]["levels"]), size=n, p=_shares(config["phq8"]["shares"])),
        "phq9": rng.choice(len(config["phq9"]["levels"]), size=n, p=_shares(config["phq9"]["shares"])),
    }
    return Dataset.from_columns(cohort_columns(config), data)


@dataclass(frozen=True, eq=False)
class PlasmodeModel:
    name: str
    formula: tuple[str, ...]
    labels: tuple[str, ...]
    coefficients: np.ndarray

    def coefficient(self, label: str) -> float:
        return float(self.coefficients[self.labels.index(label)])

    def linear_predictor(self, d: Dataset) -> np.ndarray:
        X = design_matrix(d, self.formula)
        # 0 × (±inf) 视为 0，允许用无穷系数表示概率退化
        products = np.where(X == 0.0, 0.0, X * self.coefficients)
        return products.sum(axis=1)

    def probability(self, d: Dataset) -> np.ndarray:
        return expit(self.linear_predictor(d))


@dataclass(frozen=True, eq=False)
class PlasmodeModels:
    missing_phq: PlasmodeModel
    treatment: PlasmodeModel
    outcome_5yr: PlasmodeModel
    outcome_1yr: PlasmodeModel

    def outcome(self, horizon: str) -> PlasmodeModel:
        try:
            return getattr(self, OUTCOMES[horizon])
        except KeyError:
            raise UnknownScenarioError(f"plasmode-{horizon}")


def _template_dataset() -> Dataset:
    """零行数据，只用于计算设计列标签"""
    specs = cohort_columns() + (binary("X"), binary("Y"))
    return Dataset(specs, np.empty((0, len(specs))), np.empty((0, len(specs)), dtype=bool))


def load_plasmode_models(path: str = PLASMODE_MODELS_PATH) -> PlasmodeModels:
    """读取 <模型>.<设计列标签>=系数 格式的系数表，并校验项集合与模型公式完全一致"""
    if not os.path.exists(path):
        raise ConfigError(f"找不到 plasmode 系数表: {path}")
    entries = dotenv_values(path)
    template = _template_dataset()
    models = {}
    for name in MODEL_NAMES:
        formula = MODEL_FORMULAS[name]
        labels = design_labels(template, formula)
        prefix = f"{name}."
        table = {key[len(prefix):]: value for key, value in entries.items() if key.startswith(prefix)}
        unknown = sorted(set(table) - set(labels))
        absent = [label for label in labels if label not in table]
        if unknown:
            raise SchemaError(f"模型 {name} 含有引用不存在列的项: {unknown}")
        if absent:
            raise SchemaError(f"模型 {name} 缺少系数: {absent}")
        try:
            coefficients = np.array([float(table[label]) for label in labels])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"模型 {name} 的系数无法解析: {e}")
        models[name] = PlasmodeModel(name, tuple(formula), tuple(labels), coefficients)
    return PlasmodeModels(**models)


def _bernoulli(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(len(p)) < p).astype(float)


def simulate_plasmode_ideal(cohort: Dataset, models: PlasmodeModels, outcome: str, n: int,
                            rng: np.random.Generator) -> Dataset:
    """有放回抽样协变量，依次生成处理、结局和 PHQ 观测指示 R（不遮盖）"""
    if cohort.n_rows == 0:
        raise ConfigError("队列为空")
    outcome_model = models.outcome(outcome)
    rows = rng.integers(0, cohort.n_rows, size=n)
    d = cohort.take(rows)
    d = d.with_column(binary("X"), _bernoulli(models.treatment.probability(d), rng))
    d = d.with_column(binary("Y"), _bernoulli(outcome_model.probability(d), rng))
    missing = _bernoulli(models.missing_phq.probability(d), rng)
    d = d.with_column(binary("R"), 1.0 - missing)
    return d.select(ANALYSIS_COLUMNS)


def apply_plasmode_missingness(ideal: Dataset) -> Dataset:
    """在 R=0 的行遮盖 PHQ 列"""
    hidden = ideal.column("R") == 0
    out = ideal
    for name in PHQ_COLUMNS:
        out = out.with_column(out.spec(name), out.column(name), missing=hidden)
    return out


def generate_plasmode(cohort: Dataset, models: PlasmodeModels, outcome: str, n: int,
                      rng: np.random.Generator) -> Dataset:
    return apply_plasmode_missingness(simulate_plasmode_ideal(cohort, models, outcome, n, rng))


@dataclass(frozen=True)
class PlasmodeScenario:
    outcome: str
    n: int = 2000
    seed: int = 0
    cohort_size: int = 50337
    kind: str = "plasmode"

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise UnknownScenarioError(f"plasmode-{self.outcome}")

    @property
    def id(self) -> str:
        return f"plasmode-{self.outcome}"

    @classmethod
    def parse(cls, scenario_id: str, **kwargs) -> "PlasmodeScenario":
        if not scenario_id.startswith("plasmode-"):
            raise UnknownScenarioError(scenario_id)
        return cls(outcome=scenario_id[len("plasmode-"):], **kwargs)


def generate_plasmode_draw(scenario: PlasmodeScenario, cohort: Dataset, models: PlasmodeModels,
                           rng: np.random.Generator, n: Optional[int] = None) -> ScenarioDraw:
    ideal = simulate_plasmode_ideal(cohort, models, scenario.outcome, scenario.n if n is None else n, rng)
    return ScenarioDraw(ideal=ideal, observed=apply_plasmode_missingness(ideal))

