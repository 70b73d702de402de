import os
from typing import Any, Dict

import yaml
from htmlmin import minify
from jinja2 import Environment, FileSystemLoader, StrictUndefined, select_autoescape

from tools.common.errors import ConfigError
from tools.common.settings import TEMPLATES_DIR

REPORT_TEMPLATES_DIR = os.path.join(TEMPLATES_DIR, "report")


class TemplateManager:
    def __init__(self, templates_dir: str = REPORT_TEMPLATES_DIR):
        self.templates_dir = templates_dir
        self.env = Environment(
            loader=FileSystemLoader(templates_dir),
            autoescape=select_autoescape(['html']),
            # 空白控制相关
            trim_blocks=True,
            lstrip_blocks=True,
            keep_trailing_newline=True,
            undefined=StrictUndefined,
        )
        self.env.filters["num"] = format_number
        self.template_configs = {}
        self._load_template_configs()

    def _load_template_configs(self):
        """加载所有报告模板配置"""
        config_path = os.path.join(self.templates_dir, "configs")
        if os.path.exists(config_path):
            for file in sorted(os.listdir(config_path)):
                if file.endswith(('.yaml', '.yml')):
                    with open(os.path.join(config_path, file), 'r', encoding='utf-8') as f:
                        template_id = file.rsplit('.', 1)[0]
                        self.template_configs[template_id] = yaml.safe_load(f) or {}

    def get_template_config(self, template_id: str) -> Dict:
        if template_id not in self.template_configs:
            raise ConfigError(f"找不到报告模板配置: {template_id}")
        return self.template_configs[template_id]

    def get_panels(self, template_id: str) -> Dict:
        """获取指定模板的图表定义"""
        return self.get_template_config(template_id).get('panels', {})

    def render_text(self, template_id: str, data: Dict[str, Any]) -> str:
        return self.env.get_template(f"{template_id}.txt.j2").render(**data)

    def render_html(self, template_id: str, data: Dict[str, Any]) -> str:
        """渲染并压缩 HTML"""
        rendered = self.env.get_template(f"{template_id}.html").render(**data)
        return minify(rendered,
            remove_empty_space=True,
            remove_all_empty_space=False,
            remove_comments=True,
            remove_optional_attribute_quotes=False
        )


def format_number(value: Any, digits: int = 3) -> str:
    """空值显示为 -"""
    if value is None:
        return "-"
    try:
        return f"{float(value):.{digits}f}"
    except (TypeError, ValueError):
        return str(value)
