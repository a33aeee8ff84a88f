"""``key=value`` run configuration files (one key per line, ``#`` comments)."""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None, source: str = "config"):
        where = source
        if line is not None:
            where += f":{line}"
        if key is not None:
            where += f" [{key}]"
        super().__init__(f"{where}: {message}")
        self.key = key
        self.line = line


class RunConfig:
    """Parsed config with typed accessors that report the offending line."""

    def __init__(self, values: dict[str, str], lines: dict[str, int] | None = None, source: str = "config"):
        self.values = dict(values)
        self.lines = dict(lines or {})
        self.source = source
        self.used: set[str] = set()

    @classmethod
    def parse(cls, text: str, source: str = "config") -> "RunConfig":
        values, lines = {}, {}
        for no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or not key:
                raise ConfigError(f"expected key=value, got {raw.strip()!r}", line=no, source=source)
            if key in values:
                raise ConfigError("duplicate key", key=key, line=no, source=source)
            values[key] = value.strip()
            lines[key] = no
        return cls(values, lines, source)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", source=str(path)) from exc
        return cls.parse(text, str(path))

    def error(self, key: str, message: str) -> ConfigError:
        return ConfigError(message, key=key, line=self.lines.get(key), source=self.source)

    def _get(self, key, default, convert, kind):
        self.used.add(key)
        if key not in self.values:
            return default
        raw = self.values[key]
        try:
            return convert(raw)
        except (TypeError, ValueError):
            raise self.error(key, f"expected {kind}, got {raw!r}") from None

    def str(self, key: str, default=None):
        return self._get(key, default, str, "a string")

    def int(self, key: str, default=None):
        return self._get(key, default, int, "an integer")

    def float(self, key: str, default=None):
        return self._get(key, default, float, "a number")

    def optional_float(self, key: str, default=None):
        return self._get(key, default, lambda s: None if s.lower() in ("none", "") else float(s), "a number or none")

    def bool(self, key: str, default=None):
        def conv(s):
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)

        return self._get(key, default, conv, "a boolean")

    def ints(self, key: str, default=None):
        return self._get(key, default, lambda s: tuple(int(v) for v in s.split(",")), "comma-separated integers")

    def raw(self) -> dict[str, str]:
        return dict(self.values)

    def unused(self) -> list[str]:
        return sorted(set(self.values) - self.used)
