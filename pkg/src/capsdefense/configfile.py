"""Line-oriented experiment config files.

Format: UTF-8 text, `[section]` headers, `key = value` lines, `#` comments
and blank lines ignored. Unknown sections or keys are hard errors so typos
never silently fall back to defaults.
"""

from __future__ import annotations

from .errors import ConfigurationError


def parse_config(text: str, schema: dict) -> dict:
    """Parse into {section: {key: raw string value}} and validate keys.

    schema maps section name -> iterable of allowed keys.
    """
    out: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in schema:
                raise ConfigurationError(f"line {lineno}: unknown section [{section}]")
            out.setdefault(section, {})
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if section is None:
            raise ConfigurationError(f"line {lineno}: key outside any [section]")
        key = key.strip()
        if key not in schema[section]:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r} in [{section}]")
        out[section][key] = val.strip()
    return out


def read_config(path: str, schema: dict) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return parse_config(f.read(), schema)
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e


def as_bool(value: str) -> bool:
    v = value.lower()
    if v in ("true", "yes", "1"):
        return True
    if v in ("false", "no", "0"):
        return False
    raise ConfigurationError(f"expected a boolean, got {value!r}")


def as_list(value: str) -> tuple:
    return tuple(part.strip() for part in value.split(",") if part.strip())


def as_floats(value: str) -> tuple:
    return tuple(float(part) for part in as_list(value))


def coerce(section: dict, converters: dict) -> dict:
    """Apply per-key converters to a parsed section, with error context."""
    out = {}
    for key, raw in section.items():
        try:
            out[key] = converters[key](raw)
        except (ValueError, TypeError) as e:
            raise ConfigurationError(f"bad value for {key!r}: {raw!r} ({e})") from e
    return out
