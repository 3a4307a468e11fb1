"""Assembly-mode separation for the planar 3-RPR parallel manipulator."""

__version__ = "0.1.0"
