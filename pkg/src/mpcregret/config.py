"""Central tolerance ledger.

Every numerical threshold used by the library lives here so that a sweep can
override them in one place (see ``ExperimentConfig.tolerances``).
"""

from dataclasses import dataclass, fields, replace


@dataclass(frozen=True)
class Tolerances:
    symmetry: float = 1e-12          # max |X - X^T| accepted for cost matrices
    bounds_eig: float = 1e-10        # lambda_min(upper - lower) >= -bounds_eig
    sandwich_eig: float = 1e-9       # Q_min <= P_t <= P_max check
    detectability_rel: float = 1e-9  # singular-value threshold relative to sigma_max
    singular_cond: float = 1e14      # condition number treated as singular
    eig_floor: float = 1e-300        # floor applied before log / sqrt of eigenvalues
    dare_tol: float = 1e-12
    dare_max_iter: int = 100_000
    atol: float = 1e-10
    rtol: float = 1e-8
    qp_max_vars: int = 2000
    lifted_max_dim: int = 4000

    def close(self, a, b, scale=None):
        """atol + rtol * magnitude comparison used by the regret checks."""
        mag = max(abs(a), abs(b)) if scale is None else scale
        return abs(a - b) <= self.atol + self.rtol * mag


DEFAULT = Tolerances()


def with_overrides(overrides=None, base=DEFAULT):
    if not overrides:
        return base
    known = {f.name for f in fields(Tolerances)}
    unknown = set(overrides) - known
    if unknown:
        raise KeyError(f"unknown tolerance keys: {sorted(unknown)}")
    return replace(base, **overrides)
