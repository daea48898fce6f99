"""Versioned prompt templates shipped as text assets."""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


@lru_cache(maxsize=None)
def load_template(template_id: str) -> str:
    try:
        return resources.files(__name__).joinpath(f"{template_id}.txt").read_text(encoding="utf-8")
    except FileNotFoundError:
        raise KeyError(f"unknown prompt template {template_id!r}") from None


def fill(template: str, **values: object) -> str:
    """Substitute ``{name}`` placeholders in a single pass.

    Unknown placeholders are left as-is and substituted text is never rescanned,
    so braces inside questions or observations are harmless.
    """

    def sub(m: re.Match) -> str:
        key = m.group(1)
        return str(values[key]) if key in values else m.group(0)

    return _PLACEHOLDER.sub(sub, template)
