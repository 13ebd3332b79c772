""" Exception hierarchy used throughout gaflow.

Every error carries enough context to be reported on the command line
without a traceback; scripts.main() maps the classes onto process exit
codes (see constants.py).
"""


class GaflowError(Exception):
    pass


class DimensionError(GaflowError, ValueError):
    """ Raised when tensor extents do not line up.

    Parameters
    ----------
    message : str
        description, naming the offending axes
    """


class ContractError(GaflowError, ValueError):
    pass


class ConfigurationError(GaflowError, ValueError):
    pass


class FormatError(GaflowError):
    """ Raised for corrupt or truncated files.

    Parameters
    ----------
    message : str
        description of the problem
    offset : int
        byte offset at which parsing failed
    path : str
        file being read, if known
    """
    def __init__(self, message: str, offset: int = 0, path: str = ""):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (at byte offset {offset})")


class SolverError(GaflowError):
    pass


class GenerationError(GaflowError, ValueError):
    pass


class NumericalError(GaflowError):
    def __init__(self, message: str, batch_index: int | None = None):
        self.batch_index = batch_index
        if batch_index is not None:
            message = f"{message} (batch {batch_index})"
        super().__init__(message)
