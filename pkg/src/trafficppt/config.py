"""``key=value`` config files with optional ``[section]`` headers."""

from __future__ import annotations

from pathlib import Path


def parse_key_values(text: str) -> dict[str, str]:
    """Flat parse; later keys override earlier ones, section headers ignored."""
    return {k: v for section in parse_sections(text).values() for k, v in section.items()}


def parse_sections(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {"": {}}
    current = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        sections[current][key.strip()] = value.strip()
    return sections


def read_sections(path: str | Path) -> dict[str, dict[str, str]]:
    return parse_sections(Path(path).read_text(encoding="utf-8"))


def format_key_values(values: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())
