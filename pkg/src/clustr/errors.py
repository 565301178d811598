"""Exception types shared across the library."""


class ClustrError(Exception):
    """Base class for library errors."""


class InfeasibleError(ClustrError, ValueError):
    """A precondition on sizes/counts makes the requested operation impossible."""


class DegenerateModelError(ClustrError, ValueError):
    """Model geometry is degenerate (e.g. identical centroids across classes)."""


class DataFormatError(ClustrError, ValueError):
    """Malformed on-disk data (CSV/JSON); message carries the offending location."""


class ConfigError(ClustrError, ValueError):
    """Invalid run configuration; message names the offending field."""
