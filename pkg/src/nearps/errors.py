class DomainError(ValueError):
    """Raised when inputs are well-formed but outside the model's domain."""
