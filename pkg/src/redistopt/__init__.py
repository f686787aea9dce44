"""Nonconvex regularized learning by moving the nonconvexity into the loss.

A penalty ``kappa(|x|)`` from the supported family splits into a smooth
concave remainder, which joins the loss, and a scaled convex norm with a
cheap proximal map.  The solvers in :mod:`redistopt.solvers` and
:mod:`redistopt.lowrank` work on the resulting composite problems.
"""
from .regularizers import (DomainError, KappaSpec, SmoothedKappaSpec, UnsupportedVariantError, Variant,
                           bar_group, bar_scalar, bar_spectral, derived_constants, kappa_derivative,
                           kappa_value, parse_regularizer, smoothed_kappa)
from .proximal import (GroupStructure, ProxResult, StructureError, prox_group_l2, prox_l1,
                       prox_l1_analysis, prox_sparse_group, prox_tree, prox_tv_inexact)
from .solvers import (CompositeProblem, ConvexTerm, DCSplit, SolveTrace, SolverAbort, SolverParams,
                      admm_consensus, cccp, estimate_lipschitz, fista, inexact_nmapg, nmapg, scp,
                      smoothing_solver)
from .models import (Dataset, ImageGrid, build_rsc, build_sparse_group, build_tree, build_tv_denoise,
                     synth_sparse_group)
from .lowrank import (FactoredMatrix, ObservedMatrix, completion_loss, fw_qp, fw_solve, local_optimize,
                      rank1_svd, warmstart)

__version__ = "0.1.0"
