"""Exception types shared across the package."""


class DeformError(Exception):
    """Base class for errors raised by the deformation pipeline."""


class OutOfDomainError(DeformError):
    """A query point lies outside the [-1, 1]^2 domain of a layer's mesh.

    Raised by forward point location.  ``layer_index`` and ``point_index``
    identify where in a composed net the query failed; both are ``None``
    when the failure happened outside a net context.
    """

    def __init__(self, message, point=None, layer_index=None, point_index=None):
        super().__init__(message)
        self.point = point
        self.layer_index = layer_index
        self.point_index = point_index


class NotInImageError(DeformError):
    """A query point lies outside the image polygon of a deformed mesh.

    The inverse-side counterpart of :class:`OutOfDomainError`; kept distinct
    because the two conditions have different fixes (bad input domain versus
    a point that the map simply never produces).
    """

    def __init__(self, message, point=None, layer_index=None, point_index=None):
        super().__init__(message)
        self.point = point
        self.layer_index = layer_index
        self.point_index = point_index


class InternalError(DeformError):
    """Invariant violation that indicates a bug, not a user error."""


class NumericalError(DeformError):
    """Non-finite values met during loss, gradient, or optimizer work."""
