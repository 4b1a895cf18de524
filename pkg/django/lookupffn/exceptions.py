'''
Exceptions raised by the lookupffn library.

Every error carries enough context for the management command to decide on an
    exit status: validation problems exit with 1, numeric problems with 2.
'''
import numpy as np


class LookupFFNError(Exception):
    '''Base class of every error raised by lookupffn.'''
    exit_status = 1


class SizeError(LookupFFNError, ValueError):
    '''Shapes or sizes do not agree with the declared configuration.'''


class ConfigError(LookupFFNError, ValueError):
    '''A configuration object violates one of its invariants.'''


class UsageError(LookupFFNError):
    '''An operation was called out of order, e.g. backward without a cache.'''


class CheckpointError(LookupFFNError):
    '''A checkpoint file is truncated or has an unexpected header.'''


class NumericError(LookupFFNError):
    '''Non-finite values showed up in the named stage.'''
    exit_status = 2

    def __init__(self, stage, message=None):
        self.stage = stage
        super().__init__(message or 'non-finite values in stage {!r}'.format(stage))


class TrainingError(NumericError):
    '''
    Optimization diverged.

    Args:
        step - index of the step at which the loss became non-finite
        step_size - learning rate in use when it happened
    '''
    def __init__(self, step, step_size, stage='train'):
        self.step = step
        self.step_size = step_size
        super().__init__(
            stage,
            'loss became non-finite at step {} (step size {:g})'.format(
                step, step_size),
        )


class AuditError(NumericError):
    '''Instrumented FLOP counts disagree with the analytic model.'''

    def __init__(self, stage, measured, expected, tolerance):
        self.measured = measured
        self.expected = expected
        self.tolerance = tolerance
        super().__init__(
            stage,
            'stage {!r}: measured {:g} FLOP, analytic {:g} (tolerance {:.0%})'
            .format(stage, measured, expected, tolerance),
        )


def ensure_finite(array, stage):
    # raises NumericError naming the stage when array holds NaN or Inf
    if not np.all(np.isfinite(array)):
        raise NumericError(stage)
    return array
