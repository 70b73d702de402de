import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from tools.estimators.records import ESTIMANDS, ESTIMATOR_IDS  # noqa: E402
from tools.report.template_manager import TemplateManager  # noqa: E402
from tools.simulate.harness import scenario_slug  # noqa: E402
from tools.truth.metrics import SummaryRow, read_summaries  # noqa: E402

_logger = logging.getLogger(__name__)

REPORT_TEMPLATE = "summary"
NOMINAL_LEVEL = 0.95

# SVG 输出不含随机 ID 与日期，便于比对
plt.rcParams["svg.hashsalt"] = "confounder-sim"


def coverage_band(replicates: int) -> float:
    """覆盖率的蒙特卡罗参考带半宽 1.96·sqrt(0.05·0.95/重复次数)"""
    if replicates < 1:
        raise ValueError(f"重复次数至少为 1: {replicates}")
    return 1.96 * math.sqrt((1.0 - NOMINAL_LEVEL) * NOMINAL_LEVEL / replicates)


@dataclass(frozen=True)
class ReportResult:
    text_path: str
    html_path: str
    panels: tuple[str, ...]
    sections: int


def _value(x: Optional[float]) -> float:
    return np.nan if x is None else float(x)


def _estimator_order(rows: Sequence[SummaryRow]) -> list[str]:
    present = {row.estimator for row in rows}
    return [e for e in ESTIMATOR_IDS if e in present] + sorted(present - set(ESTIMATOR_IDS))


def _group_key(row: SummaryRow):
    estimand_rank = ESTIMANDS.index(row.estimand) if row.estimand in ESTIMANDS else len(ESTIMANDS)
    return row.scenario, estimand_rank, row.estimand, row.flavor


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _forest_panel(rows: Sequence[SummaryRow], metric: str, label: str, title: str, path: str,
                  reference: Optional[float] = None) -> str:
    """估计量为纵轴，每个场景一组点；缺失的格子留空"""
    estimators = _estimator_order(rows)
    scenarios = sorted({row.scenario for row in rows})
    lookup = {(row.scenario, row.estimator): row for row in rows}
    fig, ax = plt.subplots(figsize=(6, 0.4 * len(estimators) + 1.5))
    positions = np.arange(len(estimators))
    offsets = np.linspace(-0.25, 0.25, len(scenarios)) if len(scenarios) > 1 else [0.0]
    for offset, scenario in zip(offsets, scenarios):
        values = [_value(getattr(lookup[(scenario, e)], metric)) if (scenario, e) in lookup else np.nan
                  for e in estimators]
        ax.plot(values, positions + offset, "o", label=scenario)
    if reference is not None:
        ax.axvline(reference, color="grey", linewidth=0.8)
    ax.set_yticks(positions)
    ax.set_yticklabels(estimators)
    ax.invert_yaxis()
    ax.set_xlabel(label)
    ax.set_title(title)
    if len(scenarios) > 1:
        ax.legend(fontsize="small")
    return _save(fig, path)


def _rrmse_panel(rows: Sequence[SummaryRow], label: str, title: str, path: str) -> str:
    estimators = _estimator_order(rows)
    scenarios = sorted({row.scenario for row in rows})
    lookup = {(row.scenario, row.estimator): row for row in rows}
    fig, ax = plt.subplots(figsize=(6, 0.4 * len(estimators) + 1.5))
    positions = np.arange(len(estimators))
    height = 0.8 / max(len(scenarios), 1)
    for i, scenario in enumerate(scenarios):
        values = [_value(lookup[(scenario, e)].rrmse) if (scenario, e) in lookup else np.nan for e in estimators]
        ax.barh(positions + i * height, values, height=height, label=scenario)
    ax.set_yticks(positions + 0.4 - height / 2)
    ax.set_yticklabels(estimators)
    ax.invert_yaxis()
    ax.set_xlabel(label)
    ax.set_title(title)
    if len(scenarios) > 1:
        ax.legend(fontsize="small")
    return _save(fig, path)


def _coverage_panel(rows: Sequence[SummaryRow], config: dict, title: str, path: str) -> str:
    estimators = _estimator_order(rows)
    replicates = max(row.replicates for row in rows)
    band = coverage_band(replicates)
    fig, ax = plt.subplots(figsize=(6, 0.4 * len(estimators) + 1.5))
    positions = np.arange(len(estimators))
    by_estimator = defaultdict(list)
    for row in rows:
        by_estimator[row.estimator].append(row)
    nominal = [np.nanmean([_value(r.nominal_coverage) for r in by_estimator[e]]) for e in estimators]
    oracle = [np.nanmean([_value(r.oracle_coverage) for r in by_estimator[e]]) for e in estimators]
    ax.axvspan(NOMINAL_LEVEL - band, NOMINAL_LEVEL + band, color="lightgrey")
    ax.axvline(NOMINAL_LEVEL, color="grey", linewidth=0.8)
    ax.plot(nominal, positions - 0.15, "o", label=config.get("nominal_label", "nominal"))
    ax.plot(oracle, positions + 0.15, "s", label=config.get("oracle_label", "oracle"))
    ax.set_yticks(positions)
    ax.set_yticklabels(estimators)
    ax.invert_yaxis()
    ax.set_xlabel(config.get("label", "coverage"))
    ax.set_title(title)
    ax.legend(fontsize="small")
    return _save(fig, path)


def _panels(rows: Sequence[SummaryRow], out_dir: str, panel_config: dict) -> list[dict]:
    """每个 (估计目标, 真值类型) 画偏差、rRMSE 与覆盖率三张图"""
    groups = defaultdict(list)
    for row in rows:
        groups[(row.estimand, row.flavor)].append(row)
    panels = []
    for (estimand, flavor), group in sorted(groups.items()):
        converged = [row for row in group if row.converged]
        if not converged:
            continue
        stem = f"{scenario_slug(estimand)}_{flavor}"
        plasmode = all(row.is_plasmode for row in group)
        bias_config = panel_config.get("bias", {})
        bias_label = bias_config.get("plasmode_label" if plasmode else "label", "bias")
        title = f"{estimand} ({flavor})"
        with np.errstate(all="ignore"):
            panels.append({"title": f"{title} {bias_label}", "file": os.path.basename(_forest_panel(
                converged, "headline_bias", bias_label, title, os.path.join(out_dir, f"bias_{stem}.svg"), 0.0))})
            panels.append({"title": f"{title} rRMSE", "file": os.path.basename(_rrmse_panel(
                converged, panel_config.get("rrmse", {}).get("label", "rRMSE"), title,
                os.path.join(out_dir, f"rrmse_{stem}.svg")))})
            panels.append({"title": f"{title} coverage", "file": os.path.basename(_coverage_panel(
                converged, panel_config.get("coverage", {}), title, os.path.join(out_dir, f"coverage_{stem}.svg")))})
    return panels


def _sections(rows: Sequence[SummaryRow]) -> list[dict]:
    groups = defaultdict(list)
    for row in rows:
        groups[_group_key(row)].append(row)
    sections = []
    for (scenario, _, estimand, flavor), group in sorted(groups.items()):
        order = {e: i for i, e in enumerate(_estimator_order(group))}
        group = sorted(group, key=lambda r: order[r.estimator])
        replicates = max(row.replicates for row in group)
        plasmode = group[0].is_plasmode
        sections.append({
            "scenario": scenario,
            "estimand": estimand,
            "flavor": flavor,
            "truth": group[0].truth,
            "replicates": replicates,
            "band": coverage_band(replicates),
            "bias_header": "bias" if plasmode else "%bias",
            "rows": group,
        })
    return sections


def build_report(summary_paths: Sequence[str], out_dir: str,
                 manager: Optional[TemplateManager] = None) -> ReportResult:
    """汇总表 → 文本报告、HTML 报告和每个面板一张 SVG

    Args:
        summary_paths: summarize/simulate 写出的汇总表
        out_dir: 输出目录

    Returns:
        ReportResult；没有汇总行时生成空报告
    """
    manager = manager or TemplateManager()
    config = manager.get_template_config(REPORT_TEMPLATE)
    panel_config = manager.get_panels(REPORT_TEMPLATE)
    rows: list[SummaryRow] = []
    for path in summary_paths:
        rows += read_summaries(path)
    os.makedirs(out_dir, exist_ok=True)

    sections = _sections(rows)
    panels = _panels(rows, out_dir, panel_config) if rows else []
    data = {"title": config.get("title", config.get("name", "")), "sections": sections, "panels": panels}

    text_path = os.path.join(out_dir, "report.txt")
    with open(text_path, "w", encoding="utf-8") as f:
        f.write(manager.render_text(REPORT_TEMPLATE, data))
    html_path = os.path.join(out_dir, "report.html")
    with open(html_path, "w", encoding="utf-8") as f:
        f.write(manager.render_html(REPORT_TEMPLATE, data))
    _logger.info("报告写入 %s（%d 个小节，%d 张图）", out_dir, len(sections), len(panels))
    return ReportResult(text_path, html_path, tuple(os.path.join(out_dir, p["file"]) for p in panels), len(sections))
