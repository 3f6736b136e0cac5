"""
Exception hierarchy.

Two families exist so the command line can map failures to exit codes:
``ValidationFailure`` (bad inputs, exit 2) and ``NumericalAbort``
(optimization blew up, exit 3).
"""


class SoarError(Exception):
    exit_code: int = 1


class ValidationFailure(SoarError, ValueError):
    exit_code = 2


class NumericalAbort(SoarError, RuntimeError):
    exit_code = 3


class TemplateError(ValidationFailure):
    def __init__(self, reason: str, path: str | None = None):
        where = f" ({path})" if path else ""
        super().__init__(f"Invalid body template{where}: {reason}")
        self.reason = reason
        self.path = path


class NonManifoldMeshError(TemplateError):
    def __init__(self, bad_edges: int, degenerate_faces: int):
        super().__init__(
            f"mesh is not manifold: {bad_edges} edge(s) shared by more than two faces, "
            f"{degenerate_faces} degenerate face(s)"
        )
        self.bad_edges = bad_edges
        self.degenerate_faces = degenerate_faces


class ManifestError(ValidationFailure):
    def __init__(self, problems: list[str], path: str | None = None):
        header = f"Manifest {path} is invalid" if path else "Manifest is invalid"
        listing = "\n".join(f"  - {p}" for p in problems)
        super().__init__(f"{header} ({len(problems)} problem(s)):\n{listing}")
        self.problems = problems
        self.path = path


class StageOrderError(ValidationFailure):
    def __init__(self, stage: str, missing: str):
        super().__init__(
            f"Cannot run '{stage}': required checkpoint {missing} does not exist. "
            "Run the preceding stage first."
        )
        self.stage = stage
        self.missing = missing


class CheckpointError(ValidationFailure):
    pass


class ChannelNotRenderedError(ValidationFailure):
    def __init__(self, channels: list[str], rendered: list[str]):
        super().__init__(
            f"Gradient requested for channel(s) {', '.join(channels)} "
            f"but only {', '.join(rendered) or 'none'} were rendered"
        )
        self.channels = channels
        self.rendered = rendered


class ProtocolError(ValidationFailure):
    pass


class FieldDivergenceError(NumericalAbort):
    def __init__(self, step: int, loss: float, window: int):
        super().__init__(
            f"Neural field pre-fitting diverged: loss increased for {window} consecutive "
            f"steps (step {step}, loss {loss:.6g})"
        )
        self.step = step
        self.loss = loss
        self.window = window


class NonFiniteLossError(NumericalAbort):
    def __init__(self, stage: str, step: int, terms: dict[str, float] | None = None):
        detail = ""
        if terms:
            detail = " (" + ", ".join(f"{k}={v:.4g}" for k, v in terms.items()) + ")"
        super().__init__(f"Non-finite loss in {stage} at step {step}{detail}")
        self.stage = stage
        self.step = step
        self.terms = terms or {}


class DenoiserShapeError(NumericalAbort):
    def __init__(self, expected: tuple[int, ...], received: tuple[int, ...]):
        super().__init__(
            f"Denoiser returned an image of shape {received}, expected {expected}"
        )
        self.expected = expected
        self.received = received
