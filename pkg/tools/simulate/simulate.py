from collections.abc import Generator
from dataclasses import asdict, replace
from typing import Any

from dify_plugin import Tool
from dify_plugin.entities.tool import ToolInvokeMessage

from tools.simulate.harness import RunConfig, run


class SimulateTool(Tool):
    def _invoke(self, tool_parameters: dict[str, Any]) -> Generator[ToolInvokeMessage]:
        config_path = tool_parameters.get('config_path')
        seed = tool_parameters.get('seed')
        n_jobs = tool_parameters.get('n_jobs')

        try:
            config = RunConfig.from_yaml(config_path)
            # 显式参数优先于环境变量和配置文件
            overrides = {}
            if seed not in (None, ''):
                overrides['seed'] = int(seed)
            if n_jobs not in (None, ''):
                overrides['n_jobs'] = int(n_jobs)
            if overrides:
                config = replace(config, **overrides)
            result = run(config)
            yield ToolInvokeMessage(
                type="text",
                message={
                    "text": f"模拟完成：{result.records} 条记录（{result.failed} 条未收敛）\n"
                            f"记录表：{result.records_path}\n清单：{result.manifest_path}",
                    "json": asdict(result)
                }
            )
        except Exception as e:
            yield ToolInvokeMessage(
                type="text",
                message={
                    "text": f"模拟失败：{str(e)}"
                }
            )
            raise e
