"""
Custom exception classes for the continual learning system.
"""

class ContinualSystemError(Exception):
    """Base class for continual learning system exceptions."""
    pass

class ShapeError(ContinualSystemError):
    """Exception raised when array shapes or dimensions do not line up."""
    pass

class InputError(ContinualSystemError):
    """Exception raised for argument values outside their valid domain."""
    pass

class NumericError(ContinualSystemError):
    """Exception raised when a numeric operation produces non-finite values."""
    pass

class DegenerateInputError(ContinualSystemError):
    """Exception raised when extraction is attempted on empty statistics."""
    pass

class StateError(ContinualSystemError):
    """Exception related to training state (missing checkpoint, empty split)."""
    pass

class UsageError(ContinualSystemError):
    """Exception raised when an API is used out of order (e.g. stale trace)."""
    pass

class DataError(ContinualSystemError):
    """Exception related to dataset files."""
    pass

class FormatError(DataError):
    """Exception raised for malformed binary payloads."""
    pass

class ConfigurationError(ContinualSystemError):
    """Exception related to configuration errors."""
    pass

class CheckpointError(ContinualSystemError):
    """Exception related to checkpoint container operations."""
    pass

class ArtifactError(ContinualSystemError):
    """Exception raised when a run artifact cannot be written."""
    def __init__(self, path: str, reason: str = ""):
        self.path = path
        self.reason = reason
        super().__init__(path, reason)

    def __str__(self) -> str:
        return f"Cannot write {self.path}: {self.reason}"
