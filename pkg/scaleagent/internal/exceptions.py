"""Exceptions for ScaleAgent."""

class ScaleAgentError(Exception):
    """Base exception for all ScaleAgent errors."""
    pass

class DimensionError(ScaleAgentError):
    """Patch or window does not fit the raster."""
    pass

class CoverageError(ScaleAgentError):
    """Stitched predictions leave pixels uncovered."""
    pass

class GeometryError(ScaleAgentError):
    """Footprint or crop arithmetic selected an empty region."""
    pass

class ShapeError(ScaleAgentError):
    """Array shapes or class ranges are inconsistent."""
    pass

class UndefinedScoreError(ScaleAgentError):
    """Score requested for masks where every class is absent."""
    pass

class GenerationError(ScaleAgentError):
    """Synthetic scene could not be generated."""
    pass

class FormatError(ScaleAgentError):
    """Binary file is malformed or has the wrong magic."""
    pass

class CheckpointError(ScaleAgentError):
    """Checkpoint missing or incompatible with the network."""
    pass

class DatasetError(ScaleAgentError):
    """Dataset manifest missing or unreadable."""
    pass

class RolloutError(ScaleAgentError):
    """Rollout segment is empty or inconsistent."""
    pass
