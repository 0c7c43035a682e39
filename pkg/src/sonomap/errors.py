"""Exception types shared across the package."""


class SonomapError(Exception):
    """Base class for package errors."""


class ContractError(SonomapError):
    """A caller violated a documented precondition (shape, range, norm...)."""


class FileFormatError(SonomapError):
    """A file on disk does not match its expected format."""


class OutOfDomainError(ContractError):
    """A query point lies outside the field's domain box."""


class RefinementFailedError(SonomapError):
    """All refinement restarts diverged; carries the best finite iterate."""

    def __init__(self, message, best_pose=None, best_loss=None):
        super().__init__(message)
        self.best_pose = best_pose
        self.best_loss = best_loss
