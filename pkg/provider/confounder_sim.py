import os
from typing import Any

from dify_plugin import ToolProvider
from dify_plugin.errors.tool import ToolProviderCredentialValidationError

from tools.common import settings


class ConfounderSimProvider(ToolProvider):
    def _validate_credentials(self, credentials: dict[str, Any]) -> None:
        """没有凭证；只检查场景表和 plasmode 系数表是否随插件一起发布"""
        try:
            for path in (settings.SCENARIOS_DIR, settings.PLASMODE_MODELS_PATH):
                if not os.path.exists(path):
                    raise FileNotFoundError(f"缺少文件: {path}")
        except Exception as e:
            raise ToolProviderCredentialValidationError(str(e))
