"""Exception hierarchy shared by every stage of the pipeline."""


class StackSegError(Exception):
    """Base class for all package errors."""


# volume
class ConstantVolume(StackSegError):
    pass


class InconsistentStack(StackSegError):
    pass


class DimsMismatch(StackSegError):
    pass


class InvalidVolume(StackSegError):
    pass


class FormatError(StackSegError):
    pass


# synthgen
class InfeasibleSpec(StackSegError):
    pass


class EmptyLabeledSplit(StackSegError):
    pass


# autodiff
class ShapeMismatch(StackSegError):
    pass


class LabelOutOfRange(StackSegError):
    pass


class ScheduleExhausted(StackSegError):
    pass


# learners / ensemble
class NoLabeledData(StackSegError):
    pass


class DivergedLoss(StackSegError):
    pass


class UntrainedLearner(StackSegError):
    pass


class NotWarmStarted(StackSegError):
    """NN-fit was asked to refine a meta-learner that never went through random-fit."""


class MissingGroundTruth(StackSegError):
    pass


# metrics
class EmptySurface(StackSegError):
    """A class has no voxels in one of the compared label volumes."""


# cli
class ConfigError(StackSegError):
    pass


class IncompleteRun(StackSegError):
    pass


class StageError(StackSegError):
    """Wraps any failure with the name of the pipeline stage that raised it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
