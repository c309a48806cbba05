"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A caller broke an interface contract (shapes, dimensions, ordering)."""


class DomainError(ValueError):
    """An argument lies outside the domain where a quantity is defined."""


class IntegrationDiverged(RuntimeError):
    def __init__(self, t, message="state became non-finite"):
        self.time = float(t)
        super().__init__(f"{message} at t={self.time:.6g}")


class OracleFailure(RuntimeError):
    """The Riccati integration blew up."""


class QuadratizationError(RuntimeError):
    def __init__(self, t, x):
        self.time = t
        self.state = x
        super().__init__(f"non-finite cost Hessian at t={t}, x={x}")


class DegenerateEstimate(RuntimeError):
    """Every importance weight underflowed."""
