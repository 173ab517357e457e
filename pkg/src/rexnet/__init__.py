"""Edge-preserving, multi-scale contextual salient object detection at desk scale."""

__version__ = "0.1.0"
