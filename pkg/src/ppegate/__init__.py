"""PPE compliance checking for entry control points.

Dataset tooling, photometric augmentation, a detector-agnostic
person-crop pipeline, detection evaluation and an airlock gate service.
"""

from ppegate.classes import PERSON, PpeClass

__version__ = "0.1.0"

__all__ = ["PERSON", "PpeClass", "__version__"]
