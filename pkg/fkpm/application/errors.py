class FKError(Exception):
    """Base class for every domain failure raised by fkpm."""


class InvalidModel(FKError):
    pass


class ZeroMass(FKError):
    """mu(G) = 0: the potential kills the whole measure."""


class UnsupportedSpace(FKError):
    """An exact operator was requested on a space that is not finite."""


class EnumerationCap(FKError):
    pass


class PotentialRange(FKError):
    """A potential value fell outside (0, 1]."""


class SupportMismatch(FKError):
    pass


class NegativeWeight(FKError):
    """A measure was given a negative weight."""


class EpsilonTooLarge(FKError):
    """Some epsilon_n * G_n(x) exceeds 1."""


class AllDead(FKError):
    """Every particle has zero potential."""


class MissingStates(FKError):
    """Genealogy retention was disabled for the run."""


class StationarityViolated(FKError):
    pass


class ZeroRow(FKError):
    """A backward transition row has a zero normalizer."""


class MissingDensity(FKError):
    pass


class MissingGradient(FKError):
    pass


class NotMixing(FKError):
    """Supports of the kernel rows differ, so chi_m is infinite."""


class InvalidCertificate(FKError):
    pass


class NegativeLambda(FKError):
    pass


class DivergentEntropy(FKError):
    pass


class InvalidBn(FKError):
    """b_n is smaller than kappa(n)."""


class NonPositiveEigenvector(FKError):
    pass
