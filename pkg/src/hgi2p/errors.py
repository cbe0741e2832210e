"""Exception types shared across the pipeline."""


class HgI2PError(Exception):
    """Base class for all pipeline errors."""


class InsufficientCorrespondences(HgI2PError):
    """Fewer 2D-3D pairs than the pose solver needs."""


class DegenerateConfiguration(HgI2PError):
    """RANSAC exhausted its budget without a usable consensus."""


class ShapeMismatch(HgI2PError):
    """Scene region counts exceed the sizes the model was created with."""


class EmptyMatch(HgI2PError):
    """No region pair carries enough edge weight to match inside."""


class NoPositives(HgI2PError):
    """Correspondence loss called with no ground-truth positive pairs."""


class NonFiniteLoss(HgI2PError):
    """Loss evaluated to NaN or infinity."""


class RetryExhausted(HgI2PError):
    """Scene generator could not satisfy visibility constraints."""


class SceneParseError(HgI2PError):
    """A scene or model file is malformed; message names the file."""
