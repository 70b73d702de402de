from collections.abc import Generator
from dataclasses import asdict
from typing import Any

from dify_plugin import Tool
from dify_plugin.entities.tool import ToolInvokeMessage

from tools.common import settings
from tools.report.report_builder import build_report
from tools.report.template_manager import TemplateManager


class ReportTool(Tool):
    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self.template_manager = TemplateManager()

    def _invoke(self, tool_parameters: dict[str, Any]) -> Generator[ToolInvokeMessage]:
        summary_paths = tool_parameters.get('summary_paths', '')
        output_dir = settings.output_dir(tool_parameters.get('output_dir') or None)

        try:
            paths = [p.strip() for p in summary_paths.split(',') if p.strip()]
            result = build_report(paths, output_dir, self.template_manager)
            with open(result.text_path, 'r', encoding='utf-8') as f:
                text = f.read()
            yield ToolInvokeMessage(
                type="text",
                message={
                    "text": text,
                    "json": asdict(result)
                }
            )
        except Exception as e:
            yield ToolInvokeMessage(
                type="text",
                message={
                    "text": f"报告生成失败：{str(e)}"
                }
            )
            raise e
