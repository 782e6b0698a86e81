"""Exception hierarchy shared across the package.

Argument-validation failures raise plain :class:`ValueError` / :class:`TypeError`;
the classes below cover failures that map to distinct CLI exit codes:

====================== =========
exception              exit code
====================== =========
ConfigurationError     2
IntegrityError         3
NumericError           4
ConvergenceError       5
====================== =========

Anything else escaping the CLI exits with code 1.
"""

from __future__ import annotations


class WindndpError(Exception):
    """Base class for package-specific failures."""


class ConfigurationError(WindndpError):
    """Invalid or inconsistent experiment configuration."""


class IntegrityError(WindndpError):
    """Data integrity failure: digest mismatch, corrupt or truncated files."""


class NumericError(WindndpError):
    """Numeric failure: non-finite values, factorization breakdown after
    jitter escalation, or divergent iterates."""


class SamplerDivergenceError(NumericError):
    """Reverse process produced non-finite values; carries the offending step."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"reverse process diverged at step t={step}")


class ConvergenceError(WindndpError):
    """An optimizer failed to reach a usable solution."""
