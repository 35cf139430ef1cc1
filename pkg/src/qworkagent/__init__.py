"""Memory-assisted work extraction from quantum processes.

Tailored work extraction (``extraction``), belief dynamics over hidden
Markov sources (``processes``, ``belief``), time-ordered policies
(``policy``), reference bounds (``bounds``) and bandit learning of an
unknown pure state while extracting (``bandit``).
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:
    __version__ = "0.1.0"

from .bandit import LinUcbVvn, PureStateOracle, extract_while_learning, tomography_first
from .belief import build_msp, classify_return_map
from .bounds import causal_dissipation, free_energy_rate_lower, helstrom, hierarchy_check
from .extraction import approach_rates, expected_work, ideal_work_table, simulate_protocol
from .policy import DPPolicy, dp_backward, tofe_rate
from .processes import QuantumHmm, build_hmm, make_golden_mean_21, make_perturbed_coin
from .qmath import ValidationError

__all__ = [
    "DPPolicy", "LinUcbVvn", "PureStateOracle", "QuantumHmm", "ValidationError", "__version__",
    "approach_rates", "build_hmm", "build_msp", "causal_dissipation", "classify_return_map", "dp_backward",
    "expected_work", "extract_while_learning", "free_energy_rate_lower", "helstrom", "hierarchy_check",
    "ideal_work_table", "make_golden_mean_21", "make_perturbed_coin", "simulate_protocol", "tofe_rate",
    "tomography_first",
]
