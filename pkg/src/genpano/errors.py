"""Exception hierarchy shared by every pipeline stage."""


class GenPanoError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(GenPanoError):
    pass


class PipelineError(GenPanoError):
    pass


class ShapeMismatch(PipelineError, ValueError):
    pass


# scene_io
class EmptyDirectory(PipelineError):
    pass


class UndecodableImage(PipelineError):
    def __init__(self, name):
        super().__init__(f"cannot decode image: {name}")
        self.name = name


class InvalidDims(PipelineError, ValueError):
    pass


class ArtifactIOError(GenPanoError, OSError):
    pass


# layout
class TooFewFeatures(PipelineError):
    pass


class DegenerateConfiguration(PipelineError):
    pass


class TooFewInliers(PipelineError):
    pass


class DisconnectedGraph(PipelineError):
    def __init__(self, ids):
        self.ids = sorted(ids)
        super().__init__(f"images not connected to the center image: {', '.join(self.ids)}")


# posenc
class BadChannelCount(ConfigError, ValueError):
    pass


class OutOfBounds(PipelineError, IndexError):
    pass


# backbone
class TimestepOutOfRange(PipelineError, ValueError):
    pass


class NotDivisible(PipelineError, ValueError):
    pass


# training
class NonFiniteLoss(PipelineError):
    def __init__(self, step):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


# generation
class TileLargerThanCanvas(PipelineError, ValueError):
    pass


class NoModel(PipelineError):
    pass


class ManifestMismatch(PipelineError):
    pass


# metrics
class EmptyEvaluationRegion(PipelineError, ValueError):
    pass


class ImageTooSmallForWindow(PipelineError, ValueError):
    pass


class NoReferenceKeypoints(PipelineError):
    pass
