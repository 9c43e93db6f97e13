"""Shape constrained tensor decomposition: CP with temporal factors drawn from a library."""
from .dictionary import Dictionary, PrototypeSpec, dictionary_from_config
from .model_selection import TauPolicy, select_tau
from .solver import SolverConfig, cp_als_baseline, fit_rank_one, sctd_decompose
from .tensor_core import CPModel, DenseTensor3, KruskalModel, kruskal_to_dense

__version__ = "0.1.0"

__all__ = [
    "CPModel", "DenseTensor3", "Dictionary", "KruskalModel", "PrototypeSpec", "SolverConfig",
    "TauPolicy", "cp_als_baseline", "dictionary_from_config", "fit_rank_one", "kruskal_to_dense",
    "sctd_decompose", "select_tau",
]
