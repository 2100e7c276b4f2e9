"""Exception types shared across the package."""


class FairMechError(Exception):
    pass


class StructuralError(FairMechError, ValueError):
    """Unknown ids, violated capacities, malformed inputs."""


class ContractViolation(FairMechError):
    """A caller asked for something the interface forbids, e.g. reading an
    unverified score off a VerifiedView."""


class SizeCapError(FairMechError):
    """Instance is too large for an exponential-time routine."""
