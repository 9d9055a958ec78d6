"""Exception hierarchy shared across the harness.

Exit-code mapping used by the CLI: ConfigError -> 1, DataError -> 2,
EndpointError -> 3, IncompleteRunError -> 4.
"""


class HarnessError(Exception):
    """Base class for all harness errors."""


class ConfigError(HarnessError):
    """Bad or missing configuration (usage errors)."""


class DataError(HarnessError):
    """Corpus, index, cache, or trace files are missing or malformed."""


class EndpointError(HarnessError):
    """A remote endpoint failed after transport retries were exhausted."""


class IncompleteRunError(HarnessError):
    """A benchmark run ended without covering the full test split."""
