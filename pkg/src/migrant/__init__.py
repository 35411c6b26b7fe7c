"""migrant: clustered topic-based pub/sub notification service."""

__version__ = "0.1.0"
