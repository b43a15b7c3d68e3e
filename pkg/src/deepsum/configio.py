"""Human-readable key=value config files for the dataclass configs.

Format: one ``key = value`` per line, ``#`` comments, and a mandatory
``version`` field. Unknown keys are an error so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import fields


class ConfigError(ValueError):
    pass


def to_text(obj) -> str:
    lines = ["version = 1"]
    for f in fields(obj):
        lines.append(f"{f.name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict:
    kv = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, val = line.partition("=")
        if not eq:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        kv[key.strip()] = val.strip()
    return kv


def from_text(cls, text: str):
    kv = parse_kv(text)
    if kv.pop("version", "1") != "1":
        raise ConfigError("unsupported config version")
    kwargs = {}
    for f in fields(cls):
        if f.name not in kv:
            continue
        raw = kv.pop(f.name)
        tname = f.type if isinstance(f.type, str) else f.type.__name__
        try:
            if tname == "int":
                kwargs[f.name] = int(raw)
            elif tname == "float":
                kwargs[f.name] = float(raw)
            elif tname == "bool":
                kwargs[f.name] = raw.lower() in ("1", "true", "yes")
            else:
                kwargs[f.name] = raw
        except ValueError as e:
            raise ConfigError(f"bad value for {f.name}: {raw!r}") from e
    if kv:
        raise ConfigError(f"unknown config keys: {sorted(kv)}")
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from e
