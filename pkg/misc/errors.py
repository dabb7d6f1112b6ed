class SegFuseError(Exception):
    '''
    Base class for every user or data error raised by the engine. The command line
    front end turns these into exit code 1.
    '''
    exit_code = 1


class SceneFormatError(SegFuseError):
    '''Malformed interchange file (bad magic, unsupported maxval, truncated payload).'''


class SceneValidationError(SegFuseError):
    '''Scene files that parse but do not agree with each other.'''


class ConfigError(SegFuseError):
    pass


class UnknownMaskError(SegFuseError):
    pass


class SynthSpecError(SegFuseError):
    pass


class MetricsError(SegFuseError):
    pass


class InvariantViolation(Exception):
    '''
    An internal contract was broken. This is a bug in the engine, not in the input,
    and maps to exit code 2.
    '''
    exit_code = 2


class EmptyCloudError(SegFuseError):
    '''A Chamfer distance was requested on a point cloud with no points.'''


class UsageError(SegFuseError):
    '''Command line that argparse could not parse.'''
