"""Exception hierarchy shared across the pipeline."""


class PrimgraspError(Exception):
    """Base class for all pipeline errors."""


class FrameMismatchError(PrimgraspError):
    """Two poses or clouds were combined across incompatible frames."""


class InsufficientPointsError(PrimgraspError):
    """A point cloud is too small for the requested operation."""


class DegenerateGeometryError(PrimgraspError):
    """Covariance or sample geometry is rank deficient."""


class FitFailedError(PrimgraspError):
    """No shape hypothesis reached the minimum inlier fraction.

    ``result`` carries the best (rejected) fit when one exists.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class FamilyDroppedError(PrimgraspError):
    """The shape is too wide for the gripper along this family's jaw axis."""


class PlacementError(PrimgraspError):
    """Scene synthesis could not place all shapes inside the workspace."""


class NoInstancesError(PrimgraspError):
    """The instance raster contains no labelled object."""


class NoFeasibleGraspError(PrimgraspError):
    """Every ranked candidate was gated out or failed the feasibility check."""


class BundleError(PrimgraspError):
    """A scene bundle or input file is missing or malformed."""


class ConfigError(PrimgraspError):
    """A configuration file or value is malformed."""
