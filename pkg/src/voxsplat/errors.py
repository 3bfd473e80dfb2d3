"""Exception types shared across the package.

The CLI maps these onto process exit codes: InvalidInput and IoError exit 2,
NumericalError exits 3, ResourceError exits 4.
"""


class VoxsplatError(Exception):
    """Base class for all package errors."""


class InvalidInput(VoxsplatError):
    """Caller handed in data that violates a documented precondition."""


class IoError(VoxsplatError):
    """A file is missing, unreadable, or malformed; message names the path."""


class NumericalError(VoxsplatError):
    """A non-finite value or numerically impossible state was produced."""


class ResourceError(VoxsplatError):
    """A configured memory or size budget would be exceeded."""


class StateError(VoxsplatError):
    """Operation called out of order (e.g. backward before forward)."""


class ProtocolError(VoxsplatError):
    """Simulated worker collective called with mismatched participants."""


class TransferError(VoxsplatError):
    """A gaussian transfer source worker is flagged unreachable."""


class ContractViolation(VoxsplatError):
    """An internal ordering/shape contract between stages was broken."""


class InsufficientData(VoxsplatError):
    """Too few samples to run a fit (message says how many were found)."""


class DegenerateFit(VoxsplatError):
    """A least-squares fit has no usable solution (constant regressor etc.)."""


class DegeneratePlane(VoxsplatError):
    """Plane parameters too close to the camera pencil for a homography."""


class EmptyMesh(VoxsplatError):
    """Isosurface extraction found no zero crossing in the observed region."""
