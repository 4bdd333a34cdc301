"""Epoch-parallel Barnes-Hut t-SNE with a single perplexity knob.

The public surface re-exported here covers the full pipeline: dataset
loading and synthesis, exact neighbor search, perplexity-calibrated
affinities, the chunk-and-mix parallel engine, embedding quality
metrics, and the deterministic SVG/CSV emitters used by the CLI.
"""

from .affinity import (
    NeighborIndex,
    SparseAffinity,
    build_neighbor_index,
    conditional_affinity,
    lambert_w0,
    load_index,
    partial_joint_affinities,
    perplexity_of,
    save_index,
    solve_bandwidth,
    solve_bandwidth_degenerate,
)
from .core import (
    DataSet,
    RngStream,
    SyntheticSpec,
    generate_synthetic,
    load_csv,
    load_dataset,
    load_matrix_market,
    make_hierarchical_gaussians,
    make_sierpinski,
    sq_distances,
    write_dataset_csv,
)
from .engine import (
    EmbeddingLayers,
    EpochSchedule,
    RunConfig,
    epoch_count,
    iters_per_epoch,
    make_epoch_schedule,
    pool_solutions,
    refine,
    run_ptsne,
)
from .errors import (
    ConfigError,
    DataFormatError,
    IncompleteEpoch,
    KTooLarge,
    NoConvergence,
    NonFiniteEmbedding,
    NoRealSolution,
    NotNormalized,
    NumericalError,
    PerplexityTooLarge,
    PtsneError,
    SpecTooLarge,
    SupportViolation,
    WorkerFailure,
)
from .neighbors import exact_knn
from .quality import (
    KlDecomposition,
    KnpCurve,
    auc,
    exact_kl,
    joint_from_conditionals,
    kl_decomposition,
    knp_curve,
    lowdim_joint,
    rank_matrix,
)
from .worker import (
    PartialProblem,
    QuadTree,
    attractive_forces,
    build_quadtree,
    embedding_diameter,
    gradient_step,
    init_embedding,
    learning_rate,
    momentum,
    partial_cost,
    repulsive_forces_bh,
    run_iterations,
    update_gains,
)

__version__ = "0.1.0"
