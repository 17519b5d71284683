"""Exception hierarchy shared by every fuselab module.

Validation problems subclass ``ValueError`` so existing ``except ValueError``
handlers keep working; failures that happen while running a computation
subclass ``RuntimeError``.
"""


class FuselabError(ValueError):
    """Base class for invalid inputs, shapes and file contents."""


class InvalidInputError(FuselabError):
    pass


class ShapeError(FuselabError):
    pass


class LabelRangeError(FuselabError):
    pass


class FormatError(FuselabError):
    """A file does not follow its documented layout."""


class MalformedHeaderError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class RigFormatError(FormatError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, strategy, epoch, loss, weight_norm):
        self.strategy = strategy
        self.epoch = epoch
        self.loss = loss
        self.weight_norm = weight_norm
        super().__init__(
            f"training diverged (strategy={strategy}, epoch={epoch}, "
            f"loss={loss}, |W|={weight_norm:.4g})"
        )


class PredictionError(RuntimeError):
    def __init__(self, frame_id, level, cause):
        self.frame_id = frame_id
        self.level = level
        super().__init__(f"prediction failed on frame {frame_id} at level {level}: {cause}")


class SceneGenerationError(RuntimeError):
    pass
