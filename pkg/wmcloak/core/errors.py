# wmcloak/core/errors.py
from typing import Iterable, Optional


class WMCloakError(Exception):
    """Base class for all toolkit errors"""


class ImageIOError(WMCloakError, OSError):
    """Raised when an image file cannot be read or written"""


class RenderError(WMCloakError):
    """Raised when watermark text cannot be rasterized"""


class IngestionError(WMCloakError):
    """Raised when a dataset directory cannot be indexed"""


class ShapeError(WMCloakError, ValueError):
    """Raised on mismatched or unsupported tensor/image shapes"""


class TrainingError(WMCloakError):
    """Raised when a training step produces a non-finite loss"""

    def __init__(self, loss_name: str, value: float):
        super().__init__(f"Non-finite {loss_name} loss: {value}")
        self.loss_name = loss_name
        self.value = value


class IntegrityError(WMCloakError):
    """Raised when a checkpoint manifest does not match its digests"""


class CheckpointShapeError(WMCloakError, ValueError):
    """Raised when a checkpoint is loaded under an incompatible image size"""


class WatermarkLookupError(WMCloakError, KeyError):
    """Raised for a watermark id that the checkpoint does not know"""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class BackendError(WMCloakError):
    """Raised when an external imitation backend fails"""

    def __init__(self, message: str, returncode: Optional[int] = None, stderr: str = ""):
        super().__init__(f"{message}\n{stderr}".rstrip())
        self.returncode = returncode
        self.stderr = stderr


class ConfigError(WMCloakError, ValueError):
    """Raised when a run configuration violates its schema"""

    def __init__(self, message: str, fields: Iterable[str] = ()):
        super().__init__(message)
        self.fields = list(fields)
