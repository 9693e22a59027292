"""Exception taxonomy shared by all modules.

Every error message is prefixed with a stable category string so the CLI
can emit single-line machine-parseable failures.
"""


class VibError(Exception):
    category = "error"

    def __init__(self, detail: str):
        self.detail = detail
        super().__init__(f"{self.category}: {detail}")


class ShapeError(VibError):
    category = "shape error"


class NumericError(VibError):
    category = "numeric error"


class ContractError(VibError):
    category = "contract error"


class DataError(VibError):
    category = "data error"


class ConfigError(VibError):
    category = "config error"


class FormatError(VibError):
    category = "format error"


class DegenerateModelError(VibError):
    category = "degenerate model error"


class DeterminismError(VibError):
    category = "determinism error"


class DivergenceError(VibError):
    category = "numeric divergence"
