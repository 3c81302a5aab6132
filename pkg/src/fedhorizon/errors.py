"""Exception taxonomy shared across the package.

The CLI maps these onto its stable exit codes: usage/config errors -> 1,
data errors -> 2, protocol/timeout errors -> 3.
"""


class ConfigError(Exception):
    """Invalid experiment configuration or command usage."""


class DataError(Exception):
    """Malformed or inconsistent data files (manifests, features, params)."""


class ProtocolError(Exception):
    """Wire-protocol violation. ``code`` is a stable short identifier."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code
