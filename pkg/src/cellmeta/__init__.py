"""Meta distribution, moments and local delay of the SIR in Poisson cellular
networks with cell-center and cell-edge users."""

__version__ = "0.1.0"

from .geometry import (  # noqa: E402
    EmptyNetworkError,
    GeometrySnapshot,
    NetworkParams,
    UserClass,
    ccu_probability,
    db_to_linear,
    linear_to_db,
    sample_network,
)
from .metadist import (  # noqa: E402
    BetaFit,
    FixedPointResult,
    MetaCurve,
    TrafficParams,
    beta_approximation,
    default_grid,
    fixed_point_solve,
    gil_pelaez_ccdf,
    meta_distribution,
    stability_verdict,
)
from .moments import (  # noqa: E402
    ActivityModel,
    MomentResult,
    critical_activity,
    critical_theta,
    mean_local_delay,
    moment,
    moment_ccu,
    moment_ccu_quadrature,
    moment_ceu,
    moment_ceu_mixture,
)
from .specialfn import ConvergenceError, SeriesControl  # noqa: E402

__all__ = [
    "EmptyNetworkError",
    "GeometrySnapshot",
    "NetworkParams",
    "UserClass",
    "ccu_probability",
    "db_to_linear",
    "linear_to_db",
    "sample_network",
    "BetaFit",
    "FixedPointResult",
    "MetaCurve",
    "TrafficParams",
    "beta_approximation",
    "default_grid",
    "fixed_point_solve",
    "gil_pelaez_ccdf",
    "meta_distribution",
    "stability_verdict",
    "ActivityModel",
    "MomentResult",
    "critical_activity",
    "critical_theta",
    "mean_local_delay",
    "moment",
    "moment_ccu",
    "moment_ccu_quadrature",
    "moment_ceu",
    "moment_ceu_mixture",
    "ConvergenceError",
    "SeriesControl",
]
