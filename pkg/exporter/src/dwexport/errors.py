"""Exporter exception hierarchy.

Everything raised on purpose derives from ExportError so scripts can
catch one type at the top level.
"""


class ExportError(Exception):
    """Base class for all exporter failures."""


class UnsupportedLayerError(ExportError):
    """The torch module has no counterpart in the engine layer set."""


class RangeError(ExportError):
    """Pixel or label values outside the representable range."""


class CountMismatchError(ExportError):
    """Image and label counts disagree."""
