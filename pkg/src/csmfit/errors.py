"""Exception classes shared across the package.

Every error carries a stable ``exit_code`` so the command-line front end can
map failures onto documented process exit statuses.
"""


class CsmError(Exception):
    exit_code = 1


class MeshParseError(CsmError):
    exit_code = 3


class FormatError(CsmError):
    exit_code = 3


class TopologyError(CsmError):
    exit_code = 4


class InvertedFaceError(TopologyError):
    def __init__(self, message, face_ids=()):
        super().__init__(message)
        self.face_ids = list(face_ids)


class RigError(CsmError):
    exit_code = 4


class EmptyForegroundError(CsmError):
    exit_code = 6


class FitDivergenceError(CsmError):
    exit_code = 5

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
