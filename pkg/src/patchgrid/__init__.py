"""Feature-preserving neural implicit surfaces from segmented B-reps."""

__version__ = "0.1.0"
