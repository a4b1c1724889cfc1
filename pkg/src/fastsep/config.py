"""Flat key/value config files: ``key = <value>`` per line, # comments.

Values are JSON literals (numbers, strings, booleans, arrays), which keeps
the format TOML-like for scalars while allowing nested position arrays.
"""

import json


def parse_kv_config(text):
    """Parse config text into a dict. Malformed lines raise ValueError."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ValueError(f"config line {lineno}: empty key")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value  # bare string
    return out


def format_kv_config(mapping):
    """Inverse of :func:`parse_kv_config`; keys are emitted sorted."""
    lines = []
    for key in sorted(mapping):
        lines.append(f"{key} = {json.dumps(mapping[key])}")
    return "\n".join(lines) + "\n"


def read_kv_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_config(fh.read())


def write_kv_config(path, mapping):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_kv_config(mapping))
