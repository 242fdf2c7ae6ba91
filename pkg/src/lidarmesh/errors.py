"""Fatal pipeline errors carrying the stage that raised them."""


class StageError(RuntimeError):
    """Unrecoverable failure in a named pipeline stage."""

    def __init__(self, stage, message):
        super().__init__(message)
        self.stage = stage

    def __str__(self):
        return f"[{self.stage}] {super().__str__()}"
