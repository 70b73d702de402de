from collections.abc import Generator
from typing import Any

from dify_plugin import Tool
from dify_plugin.entities.tool import ToolInvokeMessage

from tools.common import settings
from tools.plasmode.plasmode_tables import write_plasmode_tables


class PlasmodeGenerateTool(Tool):
    def _invoke(self, tool_parameters: dict[str, Any]) -> Generator[ToolInvokeMessage]:
        outcome = tool_parameters.get('outcome', '1yr')
        n = int(tool_parameters.get('n', 2000))
        seed = int(tool_parameters.get('seed', 0))
        output_dir = settings.output_dir(tool_parameters.get('output_dir') or None)

        try:
            paths = write_plasmode_tables(outcome, n=n, seed=seed, out_dir=output_dir)
            yield ToolInvokeMessage(
                type="text",
                message={
                    "text": "plasmode 数据已生成：\n" + "\n".join(paths.values()),
                    "json": paths
                }
            )
        except Exception as e:
            yield ToolInvokeMessage(
                type="text",
                message={
                    "text": f"生成失败：{str(e)}"
                }
            )
            raise e
