"""Exception hierarchy shared by every module."""


class VisalignError(Exception):
    pass


class DimensionError(VisalignError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(VisalignError, ValueError):
    """A hyperparameter is outside its legal range."""


class ContractError(VisalignError, ValueError):
    """A precondition of an operation does not hold."""


class NumericalError(VisalignError, ArithmeticError):
    """NaN/Inf appeared, or a normalization ran out of mass."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite or degenerate values produced by '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class TokenizerError(VisalignError, KeyError):
    def __init__(self, word: str):
        self.word = word
        super().__init__(f"unknown word {word!r}")

    def __str__(self) -> str:
        return self.args[0]


class CheckpointError(VisalignError):
    """Checkpoint bytes are malformed or incompatible."""


class ConfigError(VisalignError):
    """Run configuration failed validation; carries line-level diagnostics."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


class TrainingAborted(VisalignError):
    def __init__(self, step: int, stage: str, cause: NumericalError):
        self.step = step
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage} aborted at step {step}: {cause}")
