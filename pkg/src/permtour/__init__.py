"""permtour: unsupervised permutation-learning TSP heuristic.

Pipeline: uniform Euclidean instances -> equivariant coordinate features
-> scattering-attention GNN -> Gumbel-Sinkhorn soft permutation (training)
or Hungarian decode (inference) -> Hamiltonian cycle via conjugation of
the cyclic-shift prior.  Classical baselines (greedy NN, 2-opt) and a
Held-Karp oracle support benchmarking; ensembling (MC dropout, snapshots)
trades inference cost for solution quality.
"""

from .assignment import decode, solve_assignment
from .baselines import (BaselineConfig, CapabilityError, TwoOptConfig, greedy_nn,
                        held_karp, run_two_opt, two_opt)
from .ensemble import (EnsembleConfig, EnsembleSummary, InstanceRecord, MemberRun,
                       infer_deterministic, infer_mc, infer_snapshot, run_ensemble,
                       select_best)
from .features import (CanonicalFrame, FeatureConfig, NodeFeatures, canonical_frame,
                       instance_features, node_features)
from .instances import (AdjacencyMatrix, DistanceMatrix, EuclideanInstance,
                        adjacency, distance_matrix, generate_uniform,
                        instance_from_tag, read_instances, write_instances)
from .model import (DiffusionOperators, LayerParams, ModelConfig, ModelParams,
                    build_operators, forward, init_params)
from .permutation import (CycleStructureError, CyclicShiftMatrix,
                          HamiltonianCycleMatrix, Permutation, Tour, conjugate,
                          cyclic_shift, tour_from_cycle_matrix, tour_from_permutation,
                          tour_length, tsp_objective)
from .sinkhorn import (SinkhornConfig, SoftPermutation, gumbel_noise, gumbel_sinkhorn,
                       sinkhorn_normalize, soft_objective)
from .training import (Snapshot, TrainConfig, TrainingHistory, TrainResult,
                       config_fingerprint, load_snapshot, save_snapshot, train)

__version__ = "0.1.0"
