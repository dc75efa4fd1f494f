"""
Prompt template loader.

Templates live in templates/prompts.yaml and are rendered with str.format.
"""

import logging
from functools import lru_cache
from pathlib import Path
from typing import Dict

import yaml

logger = logging.getLogger(__name__)

TEMPLATE_PATH = Path(__file__).resolve().parent / "templates" / "prompts.yaml"


@lru_cache(maxsize=1)
def _load() -> Dict:
    with open(TEMPLATE_PATH, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    logger.debug(f"Loaded {len(data['templates'])} prompt templates (v{data['version']})")
    return data


def template_version() -> int:
    return int(_load()["version"])


def render_prompt(template: str, /, **fields) -> str:
    """Render a named template; missing fields raise KeyError."""
    templates = _load()["templates"]
    if template not in templates:
        raise KeyError(f"unknown prompt template: {template}")
    return templates[template].format(**fields).strip()
