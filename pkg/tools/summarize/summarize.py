from collections.abc import Generator
from typing import Any

from dify_plugin import Tool
from dify_plugin.entities.tool import ToolInvokeMessage

from tools.simulate.harness import RunConfig, summarize_run


class SummarizeTool(Tool):
    def _invoke(self, tool_parameters: dict[str, Any]) -> Generator[ToolInvokeMessage]:
        records_path = tool_parameters.get('records_path')
        config_path = tool_parameters.get('config_path')
        output_dir = tool_parameters.get('output_dir') or None

        try:
            paths = summarize_run(records_path, RunConfig.from_yaml(config_path), output_dir)
            yield ToolInvokeMessage(
                type="text",
                message={
                    "text": "汇总表：\n" + "\n".join(paths),
                    "json": {"summary_paths": paths}
                }
            )
        except Exception as e:
            yield ToolInvokeMessage(
                type="text",
                message={
                    "text": f"汇总失败：{str(e)}"
                }
            )
            raise e
