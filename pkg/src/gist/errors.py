"""Exception types shared across the gist package."""


class GistError(Exception):
    """Base class for all package errors."""


class ManifestError(GistError):
    """Dataset manifest is malformed or violates an invariant."""


class CaptionError(GistError):
    """Caption generation, summarization, or store handling failed."""


class ProviderError(CaptionError):
    """A caption provider could not produce a response."""


class EmbeddingError(GistError):
    """Encoding, normalization, or cache handling failed."""


class MatchError(GistError):
    """Image-caption matching failed."""


class TrainError(GistError):
    """Contrastive fine-tuning or probe training failed."""


class EvalError(GistError):
    """Metric computation or report handling failed."""


class ConfigError(GistError):
    """Pipeline configuration is invalid."""
