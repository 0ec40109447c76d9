"""Pattern-based kernel sparsity: pattern libraries, ADMM pattern selection,
connectivity pruning, a pattern-grouped packed format and a specialized engine."""
from ._backend import BACKEND
from .patterns import PatternLibrary, PatternMask, SteerableSpec, derived_library
from .nn import Network, DivergenceError, toy_network
from .admm import ExtractionSchedule, extract_pattern_library
from .connectivity import ConnectivityMask, connectivity_prune, overall_compression
from .pack import PackedModel, pack, unpack, read_psp, write_psp
from .engine import bench, execute_dense, execute_sparse

__version__ = "0.1.0"
