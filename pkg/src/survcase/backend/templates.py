"""Prompt template loading and placeholder substitution.

Templates are UTF-8 text files named ``<template_id>.txt``. Placeholders
use ``{name}`` syntax; rendering requires every placeholder to be bound.
The default store reads the templates bundled with the package; a
directory override lets deployments re-author prompts without code
changes.
"""

from __future__ import annotations

import string
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional


class TemplateStore:
    def __init__(self, override_dir: Optional[str | Path] = None):
        self.override_dir = None if override_dir is None else Path(override_dir)
        self._cache: dict[str, str] = {}

    def load(self, template_id: str) -> str:
        """Return the raw template text for an id, caching reads."""
        from .base import TemplateNotFound

        if template_id in self._cache:
            return self._cache[template_id]
        filename = f"{template_id}.txt"
        text: Optional[str] = None
        if self.override_dir is not None:
            candidate = self.override_dir / filename
            if candidate.is_file():
                text = candidate.read_text(encoding="utf-8")
        if text is None:
            ref = resources.files("survcase").joinpath("prompts", filename)
            if ref.is_file():
                text = ref.read_text(encoding="utf-8")
        if text is None:
            raise TemplateNotFound(f"no template file for id {template_id!r}")
        self._cache[template_id] = text
        return text

    def placeholders(self, template_id: str) -> set[str]:
        names = set()
        for _, field_name, _, _ in string.Formatter().parse(self.load(template_id)):
            if field_name:
                names.add(field_name)
        return names

    def render(self, template_id: str, variables: Mapping[str, str]) -> str:
        """Substitute variables into the template.

        Raises UnboundPlaceholder when any placeholder lacks a binding;
        extra variables are ignored.
        """
        from .base import UnboundPlaceholder

        text = self.load(template_id)
        needed = self.placeholders(template_id)
        missing = sorted(needed - set(variables))
        if missing:
            raise UnboundPlaceholder(
                f"template {template_id!r} placeholders unbound: {', '.join(missing)}"
            )
        return text.format(**{k: str(v) for k, v in variables.items() if k in needed})
