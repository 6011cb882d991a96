"""Scalable MCMC sampling for low-rank nonsymmetric DPPs."""

from .errors import (
    BudgetExceededError,
    KernelFormatError,
    NDPPError,
    NumericalError,
    RejectionLimitError,
    SingularConditioningError,
)
from .kernel import (
    ConditionalInner,
    LowRankKernel,
    build_kernel,
    condition_inner,
    det_subset,
    load_kernel,
    save_kernel,
    synth_kernel,
)
from .oracle import (
    ExactTable,
    empirical_distribution,
    exact_kndpp_table,
    exact_ndpp_table,
    expected_proposals,
    kappa_bound,
    psrf,
    tv_distance,
)
from .samplers import (
    ChainConfig,
    SampleReport,
    default_t_iter,
    greedy_map,
    mcmc_kndpp,
    mcmc_kndpp_batch,
    mcmc_ndpp,
    mcmc_ndpp_batch,
    tree_kdpp_sample,
    up_operator,
)
from .spectral import (
    ElemSymTable,
    YoulaFactors,
    elementary_symmetric,
    nonzero_eigvals,
    pseudo_inv_sqrt,
    sample_elementary_subset,
    sample_size,
    symmetrize_proposal,
    youla_decompose,
)
from .tree import SampleTree, build_tree, traverse_sample

__version__ = "0.1.0"
