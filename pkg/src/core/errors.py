class EnclosureError(ValueError):
    """Base class for every error raised by the enclosure package."""


class ConfigurationError(EnclosureError):
    """A run configuration violates a hypothesis of the method."""


class GeometryError(EnclosureError):
    """Invalid frame, degenerate point pair or a point off its surface."""


class NonStationaryPointError(GeometryError):
    pass


class ShadowConfigurationError(GeometryError):
    """The segment [p, p'] meets the closed obstacle."""


class DegenerateReflectorError(EnclosureError):
    pass


class DegenerateDeterminantError(EnclosureError):
    """det(S_E - S_D) is not positive at a first reflection point."""


class QuadratureError(EnclosureError):
    pass


class AsymptoticRegimeError(EnclosureError):
    pass


class IndicatorFitError(EnclosureError):
    """Indicator samples unusable for a decay fit (sign or monotonicity)."""


class SimulationError(EnclosureError):
    pass


class TraceFormatError(EnclosureError):
    pass
