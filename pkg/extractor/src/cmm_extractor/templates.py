"""Prompt template sets, shipped as pinned text files.

A template file holds one prompt per line with a ``{}`` placeholder for the
class name; blank lines and ``#`` comments are ignored.  Class names are
inserted with underscores replaced by spaces.
"""

from __future__ import annotations

import importlib.resources

from .errors import EmptyTemplateSet

_DATA_PACKAGE = "cmm_extractor.data.templates"


def parse_template_lines(lines: list[str], origin: str) -> list[str]:
    templates = []
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "{}" not in line:
            raise EmptyTemplateSet(f"{origin}: template {line!r} lacks a {{}} placeholder")
        templates.append(line)
    if not templates:
        raise EmptyTemplateSet(f"{origin}: no templates")
    return templates


def load_template_file(path: str) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_template_lines(fh.readlines(), path)


def load_builtin_templates(name: str) -> list[str]:
    """Named set from the packaged data directory (e.g. 'eurosat')."""
    resource = importlib.resources.files(_DATA_PACKAGE).joinpath(f"{name}.txt")
    if not resource.is_file():
        raise EmptyTemplateSet(f"no builtin template set named {name!r}")
    return parse_template_lines(resource.read_text(encoding="utf-8").splitlines(), name)


def fill(template: str, class_name: str) -> str:
    return template.replace("{}", class_name.replace("_", " "))
