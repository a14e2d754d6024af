class DivergenceError(FloatingPointError):
    """Training produced a non-finite objective."""

    def __init__(self, where: str, terms: dict | None = None):
        self.where = where
        self.terms = dict(terms or {})
        detail = ", ".join(f"{k}={v}" for k, v in self.terms.items())
        super().__init__(f"{where}: non-finite objective" + (f" ({detail})" if detail else ""))


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class FormatError(ValueError):
    """A binary file is malformed."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{path}: {reason}")
