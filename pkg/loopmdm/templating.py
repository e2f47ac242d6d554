"""Markdown run reports rendered from the package templates."""
from jinja2 import Environment, FileSystemLoader, StrictUndefined, select_autoescape
from pathlib import Path
from typing import Any, Dict, Optional

TEMPLATES_DIR = Path(__file__).resolve().parent / "templates"


def _fmt(value: Any, digits: int = 4) -> str:
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def get_env(templates_dir: Optional[str | Path] = None) -> Environment:
    env = Environment(
        loader=FileSystemLoader(str(templates_dir or TEMPLATES_DIR)),
        autoescape=select_autoescape(["html", "xml"]),
        undefined=StrictUndefined,
        keep_trailing_newline=True,
        trim_blocks=True,
        lstrip_blocks=True,
    )
    env.filters["fmt"] = _fmt
    return env


def render_template(template_name: str, ctx: Dict[str, Any], templates_dir: Optional[str | Path] = None) -> str:
    env = get_env(templates_dir)
    tmpl = env.get_template(template_name)
    return tmpl.render(**ctx)
