"""Prompt templates and rendering.

Templates are plain-text files with ``{{slot}}`` placeholders, shipped
with the package and overridable via a directory configured on the
engine. Rendering is strict: a missing slot or an unresolved placeholder
is an error.
"""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

TEMPLATE_NAMES = (
    "si_worker",
    "cp_worker",
    "ir_router",
    "de_judge",
    "distiller",
    "logic_judge",
)

_SLOT = re.compile(r"\{\{(\w+)\}\}")


class TemplateError(ValueError):
    pass


def load_template(name: str, override_dir: Optional[str | Path] = None) -> str:
    """Load a template by name, preferring ``override_dir`` when given."""
    if name not in TEMPLATE_NAMES:
        raise TemplateError(f"unknown template {name!r}")
    filename = f"{name}.txt"
    if override_dir is not None:
        path = Path(override_dir) / filename
        if path.exists():
            return path.read_text(encoding="utf-8")
        raise TemplateError(f"template override {path} does not exist")
    return resources.files(__package__).joinpath(filename).read_text(encoding="utf-8")


def render(template: str, **slots: str) -> str:
    """Substitute ``{{slot}}`` placeholders; every placeholder must resolve."""
    used: set[str] = set()

    def _sub(match: re.Match) -> str:
        key = match.group(1)
        if key not in slots:
            raise TemplateError(f"template slot {{{{{key}}}}} has no value")
        used.add(key)
        return str(slots[key])

    rendered = _SLOT.sub(_sub, template)
    unused = set(slots) - used
    if unused:
        raise TemplateError(f"slots not present in template: {sorted(unused)}")
    return rendered


def format_query(ref_proxy: str, mod_text: str, hypothesis: Optional[str] = None) -> str:
    lines = [f"reference image: {ref_proxy}", f"instruction: {mod_text}"]
    if hypothesis:
        lines.append(f"imagined target: {hypothesis}")
    return "\n".join(lines)


def format_candidates(pairs: Sequence[tuple[str, str]]) -> str:
    """Number candidates one per line; the judge replies with the ids."""
    return "\n".join(
        f"[{i}] id={image_id} :: {proxy}" for i, (image_id, proxy) in enumerate(pairs, 1)
    )


def format_leading(leading: Optional[str]) -> str:
    if leading is None:
        return "No leading candidate was carried over from a previous stage."
    return (
        f"Leading candidate from the previous stage: id={leading}. "
        "It appears in the candidate list above; keep it unless a better candidate exists."
    )


def format_experience(texts: Iterable[str]) -> str:
    items = [t for t in texts if t]
    if not items:
        return "(none)"
    return "\n".join(f"- {t}" for t in items)
