"""Line-oriented ``key = value`` configuration files.

Blank lines and lines starting with ``#`` are ignored. Values are parsed
against the type of the matching dataclass field; list fields are written
comma-separated.
"""
import dataclasses
import typing


class ConfigError(ValueError):
    pass


def parse_kv(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_kv(path):
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read(), str(path))


def format_kv(items):
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def write_kv(path, items):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_kv(items))


def _convert(value, tp, key):
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            v = value.lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return value
        if origin in (list, tuple):
            (inner,) = set(typing.get_args(tp)) - {Ellipsis}
            items = [s.strip() for s in value.split(",") if s.strip()]
            seq = [_convert(s, inner, key) for s in items]
            return tuple(seq) if origin is tuple else seq
        if tp == typing.Optional[float] or tp == (float | None):
            return None if value.lower() in ("", "none", "auto") else float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {tp}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return "auto"
    return repr(v) if isinstance(v, float) else str(v)


def to_kv(obj):
    return {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def from_kv(cls, items, strict=True, prefix=""):
    """Build dataclass ``cls`` from string items; unknown keys raise when ``strict``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in items.items():
        name = key[len(prefix):] if prefix and key.startswith(prefix) else key
        if name not in names:
            if strict:
                raise ConfigError(f"unknown key {key!r}")
            continue
        kwargs[name] = _convert(value, hints[name], key)
    return cls(**kwargs)


def load(cls, path, overrides=None):
    items = read_kv(path) if path else {}
    items.update(overrides or {})
    return from_kv(cls, items)
