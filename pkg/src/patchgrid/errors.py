"""Exception hierarchy for the patchgrid package."""


class PatchGridError(Exception):
    """Base class for all package errors."""


# --- input validation -------------------------------------------------------

class MissingFile(PatchGridError):
    pass


class SchemaViolation(PatchGridError):
    pass


class DanglingAdjacency(PatchGridError):
    pass


class DegenerateMesh(PatchGridError):
    pass


class NotOpenPatch(PatchGridError):
    pass


class IndexOutOfRange(PatchGridError):
    pass


class DegenerateBoundary(PatchGridError):
    pass


class EmptyShape(PatchGridError):
    pass


class EmptyCorpus(PatchGridError):
    pass


class UnknownPatch(PatchGridError):
    pass


# --- field evaluation -------------------------------------------------------

class EmptyVolume(PatchGridError):
    pass


class OutsideVolume(PatchGridError):
    pass


class EmptyLeaf(PatchGridError):
    pass


class OutOfDomain(PatchGridError):
    pass


class NonCliqueAtMaxDepth(PatchGridError):
    """A merge leaf hit maximal depth with a non-clique component.

    Construction never raises this; the leaf is flagged approximate instead.
    The class exists so callers can use it when validating grids strictly.
    """


class DomainError(PatchGridError):
    pass


# --- training / numerics ----------------------------------------------------

class NonFiniteLoss(PatchGridError):
    pass


class ShapeMismatch(PatchGridError):
    pass


class DecoderNotFrozen(PatchGridError):
    pass


# --- extraction / metrics / persistence -------------------------------------

class EmptyLevelSet(PatchGridError):
    pass


class EmptyMesh(PatchGridError):
    pass


class IoError(PatchGridError):
    pass


class VersionMismatch(PatchGridError):
    pass


class CorruptPayload(PatchGridError):
    pass
