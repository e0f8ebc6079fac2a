"""Exception hierarchy."""


class EgoPointError(Exception):
    pass


class NonPositiveDepth(EgoPointError, ValueError):
    pass


class DegenerateBaseline(EgoPointError, ValueError):
    pass


class TooFewFrames(EgoPointError, ValueError):
    pass


class InsufficientInliers(EgoPointError, ValueError):
    pass


class NoValidCandidate(EgoPointError, RuntimeError):
    pass


class DivergedOutsideBounds(EgoPointError, RuntimeError):
    pass


class DegenerateFit(EgoPointError, ValueError):
    pass


class TriangulationFailed(EgoPointError, RuntimeError):
    """Raised when one or more points of an object could not be triangulated."""

    def __init__(self, failures: dict):
        self.failures = dict(failures)
        detail = ", ".join(f"{pid}: {type(e).__name__}: {e}" for pid, e in self.failures.items())
        super().__init__(f"triangulation failed for point_ids [{detail}]")


class DegenerateHand(EgoPointError, ValueError):
    pass


class EmptyDemo(EgoPointError, ValueError):
    pass


class EmptyCorpus(EgoPointError, ValueError):
    pass


class MalformedFile(EgoPointError, ValueError):
    pass


class VersionMismatch(EgoPointError, ValueError):
    pass


class UnreachableScene(EgoPointError, ValueError):
    pass
