"""Exception hierarchy shared by lowering and the instrumenter."""


class LoweringError(ValueError):
    pass


class InstrumentError(ValueError):
    """A legality or canonical-form rejection; ``code`` is machine readable."""
    code = "E_INSTRUMENT"


class NotCanonical(InstrumentError):
    code = "E_NOT_CANONICAL"


class NestedTargetBranch(InstrumentError, LoweringError):
    code = "E_NESTED_TARGET"


class LoopCarriedDependence(InstrumentError):
    code = "E_LOOP_CARRIED"


class SliceEscapesLoop(InstrumentError):
    code = "E_SLICE_ESCAPES"
