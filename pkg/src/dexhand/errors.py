"""Exception types raised across the package."""


class DexHandError(Exception):
    """Base class for all package errors."""


class DomainError(DexHandError, ValueError):
    """Coupling geometry cannot realise the requested pose."""


class NoRootError(DexHandError):
    """The wire-length constraint has no root in the search bracket."""


class LimitError(DexHandError, ValueError):
    """A joint angle lies outside its limits."""


class EmptyCloudError(DexHandError, ValueError):
    pass


class TooShortError(DexHandError, ValueError):
    pass


class UnknownTaskError(DexHandError, KeyError):
    pass


class ParseError(DexHandError, ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class UnknownKeyError(DexHandError, KeyError):
    def __init__(self, key, section="config"):
        self.key = key
        super().__init__(f"unknown key {key!r} in {section}")

    def __str__(self):
        return self.args[0]


class SizeError(DexHandError, ValueError):
    pass


class RangeError(DexHandError, ValueError):
    pass


class MissingImageError(DexHandError, ValueError):
    pass


class ShapeError(DexHandError, ValueError):
    pass


class EmptyDatasetError(DexHandError, ValueError):
    pass
