"""Exception hierarchy shared by every module of the engine."""


class NextViTError(Exception):
    """Base class for all engine errors."""


class ShapeMismatch(NextViTError, ValueError):
    pass


class GroupMismatch(ShapeMismatch):
    pass


class HeadMismatch(ShapeMismatch):
    pass


class InvalidRatio(NextViTError, ValueError):
    pass


class InvalidPattern(NextViTError, ValueError):
    pass


class NonFinite(NextViTError, ValueError):
    pass


class NotOnTape(NextViTError, KeyError):
    pass


class NotFoldable(NextViTError):
    def __init__(self, paths):
        self.paths = list(paths)
        super().__init__("batch norm not foldable at: " + ", ".join(self.paths))


class SignatureMismatch(NextViTError, ValueError):
    pass


class WeightFileError(NextViTError):
    pass


class BadMagic(WeightFileError):
    pass


class TruncatedFile(WeightFileError):
    pass


class DuplicateName(WeightFileError):
    pass


class DtypeUnsupported(WeightFileError):
    pass


class ParseError(NextViTError, ValueError):
    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class UnknownKey(ParseError):
    pass
