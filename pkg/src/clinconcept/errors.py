"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` subclasses to exit code 1 and
:class:`NumericError` / :class:`IntegrityError` to exit code 2.
"""


class ValidationError(ValueError):
    """Bad argument, bad file content or bad configuration."""


class DimensionError(ValidationError):
    """Tensor shapes do not conform."""


class TagParseError(ValidationError):
    """Unknown tag string in a tag sequence or tag file."""

    def __init__(self, tag, line=None):
        where = f" at line {line}" if line is not None else ""
        super().__init__(f"unknown tag {tag!r}{where}")
        self.tag = tag
        self.line = line


class NumericError(ArithmeticError):
    """Non-finite value produced or consumed by a numeric routine."""


class IntegrityError(RuntimeError):
    """A NER checkpoint was paired with a language model it was not trained on."""
