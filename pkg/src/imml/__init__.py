"""Incomplete multimodal learning: a multimodal teacher distilled into an MRI-only student."""
from .estimators import (IncompleteMultimodalModel, MultimodalTeacher, UnimodalTransformer,
                         load_estimator)
from .qc import GenotypeQC

__all__ = ["GenotypeQC", "IncompleteMultimodalModel", "MultimodalTeacher",
           "UnimodalTransformer", "load_estimator"]
__version__ = "0.1.0"
