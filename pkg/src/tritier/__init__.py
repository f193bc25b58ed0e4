"""Three-tier (offline / meso / real-time) control of a shallow-water channel."""

__version__ = "0.1.0"
