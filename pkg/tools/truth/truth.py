from collections.abc import Generator
from dataclasses import asdict
from typing import Any

from dify_plugin import Tool
from dify_plugin.entities.tool import ToolInvokeMessage

from tools.common import settings
from tools.truth.truth_engine import TruthCache, compute_truth


class TruthTool(Tool):
    def _invoke(self, tool_parameters: dict[str, Any]) -> Generator[ToolInvokeMessage]:
        scenario = tool_parameters.get('scenario')
        estimand = tool_parameters.get('estimand', 'mRD')
        flavor = tool_parameters.get('flavor', 'oracle')
        draws = int(tool_parameters.get('draws', 2_000_000))
        seed = int(tool_parameters.get('seed', 0))

        try:
            cache_path = settings.truth_cache_path()
            truth = compute_truth(
                scenario, estimand, flavor, draws=draws, seed=seed, n_jobs=settings.n_jobs(),
                cache=TruthCache(cache_path) if cache_path else None,
            )
            yield ToolInvokeMessage(
                type="text",
                message={
                    "text": f"{truth.scenario} {truth.estimand}（{truth.flavor}）真值：{truth.value:.6f}"
                            f"，MC 标准误 {truth.mc_se:.2e}",
                    "json": asdict(truth)
                }
            )
        except Exception as e:
            yield ToolInvokeMessage(
                type="text",
                message={
                    "text": f"真值计算失败：{str(e)}"
                }
            )
            raise e
