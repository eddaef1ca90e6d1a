class ExtractError(Exception):
    """Base class for extraction failures."""


class EmptyTemplateSet(ExtractError):
    pass


class DatasetLayoutError(ExtractError):
    pass


class BackendError(ExtractError):
    """Model weights or runtime for the requested encoder are unavailable."""
