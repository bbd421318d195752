"""Base error type shared by every gateway module.

Module-specific errors subclass this so callers (and the HTTP layer) can
catch one base and map concrete classes to wire-level responses by name.
"""


class SscError(Exception):
    pass
