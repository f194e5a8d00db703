"""
Exception hierarchy for the ReVal lab
Versie: 1.0

Every error raised on purpose by the lab derives from RevalError so the CLI can
map it onto an exit code.
"""

from typing import Any, Dict, Optional


class RevalError(Exception):
    """Base class for all lab errors"""

    exit_code = 1


class ContractViolationError(RevalError):
    """A precondition of an operation does not hold"""


class ConfigurationError(RevalError):
    """Invalid task, preset or override"""


class StateSpaceLimitError(RevalError):
    """Exact enumeration would visit more states than allowed"""


class ReplayError(RevalError):
    """Replay buffer misuse (sampling an empty buffer, duplicate ids)"""


class MissingArtifactError(RevalError):
    """A run directory lacks the files a summary needs"""


class NumericAbortError(RevalError):
    """Non-finite loss or residual; carries the diagnostic for the metrics log"""

    exit_code = 2

    def __init__(
        self,
        message: str,
        traj_id: Optional[int] = None,
        diagnostic: Optional[Dict[str, Any]] = None,
    ):
        super().__init__(message)
        self.traj_id = traj_id
        self.diagnostic = diagnostic or {}


def exit_code_for(error: BaseException) -> int:
    """Map an exception onto the CLI exit code (0 ok, 1 config, 2 numeric)"""
    if isinstance(error, RevalError):
        return error.exit_code
    return 1
