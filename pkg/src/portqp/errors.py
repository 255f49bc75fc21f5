"""Exception hierarchy.

Every error carries a short machine-readable ``code`` which the CLI emits in
its JSON error report.
"""


class PortQPError(ValueError):
    code = "error"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


class DimensionError(PortQPError):
    code = "dimension_mismatch"


class NotSymmetricError(PortQPError):
    code = "not_symmetric"


class NotPSDError(PortQPError):
    code = "not_psd"


class BoundsError(PortQPError):
    code = "invalid_bounds"


class SingularMatrixError(PortQPError):
    code = "singular_matrix"


class DegenerateFrontierError(PortQPError):
    code = "degenerate_frontier"


class InfeasibleError(PortQPError):
    code = "infeasible"


class RecoveryError(PortQPError):
    code = "recovery_failed"


class ConvergenceError(PortQPError):
    code = "no_convergence"


class EstimationError(PortQPError):
    code = "estimation_failed"


class DataError(PortQPError):
    code = "bad_data"
