import hashlib
import json
import logging
import os
import platform
import re
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Mapping, Optional, Sequence

import joblib
import numpy as np
import pandas as pd
import scipy
import sklearn
import yaml
from joblib import Parallel, delayed

from tools.common import settings
from tools.common.errors import ConfigError, UsageError
from tools.common.rng import PURPOSE_DATA, PURPOSE_ESTIMATOR_BASE, replicate_stream, scenario_key
from tools.estimators.dispatch import EstimatorSettings, run_estimator
from tools.estimators.records import (
    CLOGOR, ESTIMANDS, ESTIMATOR_IDS, EstimateRecord, read_records, sort_records, validate_estimands,
    validate_estimators, write_records,
)
from tools.estimators.tmle import TMLE_CONFIGS
from tools.imputation.mice_engine import MiceConfig
from tools.simulate.sources import ScenarioSource, resolve_source
from tools.truth.metrics import SummaryRow, summarize_all, write_summaries
from tools.truth.truth_engine import DEFAULT_BATCHES, FLAVORS, TruthCache, TruthValue, compute_truth

_logger = logging.getLogger(__name__)

DEFAULT_ESTIMATORS = ("BNMK-C", "BNMK-O", "CC", "CNFD", "IPW", "GR", "MICE")
RECORDS_FILE = "records.csv"
MANIFEST_FILE = "manifest.json"


@dataclass(frozen=True)
class RunConfig:
    """一个场景网格的运行配置

    estimators 可以是列表，也可以是 {估计量: [估计目标]} 表，后者覆盖全局 estimands。
    """
    scenarios: tuple
    n: int = 2000
    replicates: int = 300
    estimators: tuple[str, ...] = DEFAULT_ESTIMATORS
    estimands: tuple[str, ...] = ESTIMANDS
    estimator_estimands: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "output"
    n_jobs: int = 1
    truth_draws: int = 2_000_000
    truth_flavors: tuple[str, ...] = FLAVORS
    truth_batches: int = DEFAULT_BATCHES
    truth_cache: Optional[str] = None
    mice: Mapping[str, Any] = field(default_factory=dict)
    gr_mice: Mapping[str, Any] = field(default_factory=dict)
    tmle: Mapping[str, Any] = field(default_factory=dict)
    truncate: bool = True

    def __post_init__(self):
        if not self.scenarios:
            raise ConfigError("至少需要一个场景")
        if self.replicates < 1:
            raise ConfigError(f"重复次数至少为 1: {self.replicates}")
        if self.n < 1:
            raise ConfigError(f"样本量至少为 1: {self.n}")
        validate_estimators(self.estimators)
        validate_estimands(self.estimands)
        unknown = [e for e in self.estimator_estimands if e not in self.estimators]
        if unknown:
            raise ConfigError(f"估计目标表中含有未选择的估计量: {unknown}")
        for estimator in self.estimators:
            estimands = validate_estimands(self.estimands_for(estimator))
            if estimator in TMLE_CONFIGS and CLOGOR in estimands:
                raise ConfigError(f"{estimator} 不支持估计目标 {CLOGOR}")
        bad_flavors = [f for f in self.truth_flavors if f not in FLAVORS]
        if bad_flavors:
            raise ConfigError(f"未知真值类型: {bad_flavors}")
        # 提前构造，配置错误在开始计算前暴露
        self.estimator_settings()

    def estimands_for(self, estimator: str) -> tuple[str, ...]:
        return tuple(self.estimator_estimands.get(estimator) or self.estimands)

    def estimator_settings(self) -> EstimatorSettings:
        try:
            mice = MiceConfig(**self.mice)
            gr_mice = MiceConfig(**{"m": 10, **self.gr_mice})
        except TypeError as e:
            raise ConfigError(f"mice 配置无效: {e}")
        tmle_options = dict(self.tmle)
        if "truncation" in tmle_options:
            tmle_options["truncation"] = tuple(tmle_options["truncation"])
        unknown = [k for k in tmle_options if k not in ("folds", "truncation", "n_jobs")]
        if unknown:
            raise ConfigError(f"tmle 配置含有未知字段: {unknown}")
        try:
            tmle = {name: replace(config, **tmle_options) for name, config in TMLE_CONFIGS.items()}
        except UsageError as e:
            raise ConfigError(str(e))
        return EstimatorSettings(mice=mice, gr_mice=gr_mice, tmle=tmle, truncate=self.truncate)

    def as_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=list))

    def config_hash(self) -> str:
        canonical = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, config: Mapping[str, Any]) -> "RunConfig":
        config = dict(config)
        unknown = [k for k in config if k not in cls.__dataclass_fields__]
        if unknown:
            raise ConfigError(f"运行配置含有未知字段: {unknown}")
        estimators = config.get("estimators", DEFAULT_ESTIMATORS)
        if isinstance(estimators, Mapping):
            config["estimator_estimands"] = {
                name: tuple(value) for name, value in estimators.items() if value
            }
            estimators = list(estimators)
        config["estimators"] = tuple(estimators)
        for name in ("scenarios", "estimands", "truth_flavors"):
            if name in config:
                value = config[name]
                config[name] = tuple(value) if isinstance(value, (list, tuple)) else (value,)
        for name in ("mice", "gr_mice", "tmle"):
            config[name] = dict(config.get(name) or {})
        config["output_dir"] = settings.output_dir(configured=config.get("output_dir"))
        config["n_jobs"] = settings.n_jobs(configured=config.get("n_jobs"))
        config["truth_cache"] = settings.truth_cache_path(configured=config.get("truth_cache"))
        return cls(**config)

    @classmethod
    def from_yaml(cls, path: str) -> "RunConfig":
        """读取网格配置；环境变量覆盖文件中的输出目录、真值缓存与并行度"""
        try:
            with open(path, "r", encoding="utf-8") as f:
                config = yaml.safe_load(f)
        except OSError as e:
            raise ConfigError(f"无法读取运行配置 {path}: {e}")
        except yaml.YAMLError as e:
            raise ConfigError(f"运行配置格式错误 {path}: {e}")
        if not isinstance(config, Mapping):
            raise ConfigError(f"运行配置必须是键值表: {path}")
        return cls.from_dict(config)


@dataclass(frozen=True)
class RunResult:
    records_path: str
    summary_paths: tuple[str, ...]
    manifest_path: str
    records: int
    failed: int


def scenario_slug(scenario_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9.\-]+", "_", scenario_id)


def run_replicate(source: ScenarioSource, replicate: int, config: RunConfig,
                  estimator_settings: EstimatorSettings) -> list[EstimateRecord]:
    """一次重复：生成数据后依次跑所有估计量，每个估计量有独立随机流"""
    draw = source.draw(replicate_stream(config.seed, source.id, replicate, PURPOSE_DATA))
    records = []
    for estimator in config.estimators:
        purpose = PURPOSE_ESTIMATOR_BASE + ESTIMATOR_IDS.index(estimator)
        rng = replicate_stream(config.seed, source.id, replicate, purpose)
        records += run_estimator(estimator, draw, source.working, config.estimands_for(estimator), rng,
                                 oracle_formula=source.oracle_formula, settings=estimator_settings,
                                 replicate=replicate, scenario=source.id)
    return records


def resolve_sources(config: RunConfig) -> list[ScenarioSource]:
    sources = [resolve_source(value, n=config.n, seed=config.seed) for value in config.scenarios]
    ids = [source.id for source in sources]
    duplicated = sorted({i for i in ids if ids.count(i) > 1})
    if duplicated:
        raise ConfigError(f"场景重复: {duplicated}")
    return sources


def scenario_truths(source: ScenarioSource, config: RunConfig,
                    cache: Optional[TruthCache]) -> dict[tuple[str, str, str], TruthValue]:
    estimands = sorted({e for estimator in config.estimators for e in config.estimands_for(estimator)})
    truths = {}
    for estimand in estimands:
        for flavor in config.truth_flavors:
            try:
                truths[(source.id, estimand, flavor)] = compute_truth(
                    source, estimand, flavor, draws=config.truth_draws, seed=config.seed,
                    batches=config.truth_batches, n_jobs=config.n_jobs, cache=cache)
            except UsageError as e:
                _logger.warning("跳过真值 %s %s/%s: %s", source.id, estimand, flavor, e)
    return truths


def _versions() -> dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "scikit-learn": sklearn.__version__,
        "joblib": joblib.__version__,
    }


def write_manifest(path: str, config: RunConfig, sources: Sequence[ScenarioSource], files: Sequence[str]) -> None:
    """记录配置哈希、种子和库版本，不含时间戳"""
    manifest = {
        "config_hash": config.config_hash(),
        "config": config.as_dict(),
        "seeds": {
            "base": config.seed,
            "scenarios": {source.id: scenario_key(source.id) for source in sources},
        },
        "versions": _versions(),
        "files": sorted(os.path.basename(f) for f in files),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")


def write_scenario_summary(source: ScenarioSource, records: Sequence[EstimateRecord], config: RunConfig,
                           cache: Optional[TruthCache], out_dir: str) -> str:
    rows: list[SummaryRow] = summarize_all(records, scenario_truths(source, config, cache))
    path = os.path.join(out_dir, f"summary_{scenario_slug(source.id)}.csv")
    write_summaries(rows, path)
    return path


def run(config: RunConfig) -> RunResult:
    """运行整个场景网格

    Args:
        config: 运行配置

    Returns:
        RunResult；输出只由配置决定，与并行度无关
    """
    sources = resolve_sources(config)
    estimator_settings = config.estimator_settings()
    os.makedirs(config.output_dir, exist_ok=True)
    cache = TruthCache(config.truth_cache) if config.truth_cache else None

    all_records: list[EstimateRecord] = []
    summary_paths = []
    for source in sources:
        _logger.info("场景 %s: %d 次重复，估计量 %s", source.id, config.replicates, ", ".join(config.estimators))
        batches = Parallel(n_jobs=config.n_jobs)(
            delayed(run_replicate)(source, r, config, estimator_settings) for r in range(config.replicates)
        )
        records = sort_records([record for batch in batches for record in batch])
        all_records += records
        failed = sum(not r.converged for r in records)
        if failed:
            _logger.warning("场景 %s: %d 条记录未收敛", source.id, failed)
        summary_paths.append(write_scenario_summary(source, records, config, cache, config.output_dir))

    records_path = os.path.join(config.output_dir, RECORDS_FILE)
    write_records(sort_records(all_records), records_path)
    manifest_path = os.path.join(config.output_dir, MANIFEST_FILE)
    write_manifest(manifest_path, config, sources, [records_path] + summary_paths)
    _logger.info("运行完成: %d 条记录写入 %s", len(all_records), records_path)
    return RunResult(records_path, tuple(summary_paths), manifest_path, len(all_records),
                     sum(not r.converged for r in all_records))


def summarize_run(records_path: str, config: RunConfig, out_dir: Optional[str] = None) -> list[str]:
    """对已有的记录表重新计算真值和汇总；记录里的场景优先按配置中的场景解析"""
    records = read_records(records_path)
    out_dir = out_dir or config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    cache = TruthCache(config.truth_cache) if config.truth_cache else None
    sources = {source.id: source for source in resolve_sources(config)}
    paths = []
    for scenario_id in sorted({r.scenario for r in records}):
        source = sources.get(scenario_id) or resolve_source(scenario_id, n=config.n, seed=config.seed)
        scenario_records = [r for r in records if r.scenario == scenario_id]
        paths.append(write_scenario_summary(source, scenario_records, config, cache, out_dir))
    return paths
