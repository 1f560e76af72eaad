from typing import Any

from jinja2 import Environment, PackageLoader, select_autoescape


class TemplateManager:

    def __init__(self):
        self.env = Environment(
            loader=PackageLoader('pdc_segmentation'),
            autoescape=select_autoescape(),
            trim_blocks=True,
            lstrip_blocks=True,
            keep_trailing_newline=True
        )
        self.env.filters['cell'] = _cell

    def render_table(self, name: str, **kwargs: Any) -> str:
        return self.env.get_template(f'{name}.jinja').render(**kwargs)


def _cell(value: Any, width: int, fmt: str = '{:.2f}', scale: float = 1.0) -> str:
    """Right-aligned table cell; None renders as '-'."""
    text = '-' if value is None else fmt.format(value * scale)
    return text.rjust(width)
