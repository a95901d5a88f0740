# uplinksim: slot-level simulation and training of distributed uplink contention

from .environment import (SceneConfig, PathSet, BeamPair, LinkStats, LinkStatsTable,
                          enumerate_paths, sample_channel, array_response,
                          codebook_angles, align_beams)
from .mobility import LocationGrid, MobilityModel, build_random_walk, static_model, step
from .policy import (PolicyParams, LocalState, TruncatedLinearPolicy, ConstantPolicy,
                     FullBufferPolicy, QCsmaLikePolicy, evaluate, theta_sensitivity)
from .contention import (CostConfig, GlobalState, SlotRecord, Trajectory,
                         DepartureModel, System, access_probabilities, poisson_pmf,
                         step_slot, run_episode, run_episodes_batch, discounted_cost,
                         export_trajectory_csv)
from .optim import (GradientEstimate, SgdConfig, SpsaConfig, local_transition_prob,
                    eta_theta_jacobian, eta_gradient, estimate_gradient,
                    estimate_gradient_batch, transition_tables, sgd_train, spsa_train)
from .oracle import (EnumeratedChain, build_chain, exact_discounted_cost,
                     exact_gradient_fd, exact_gradient_all, exact_gradient_chain,
                     exact_estimator_expectation, default_horizon)
from .rng import substream
from .instances import tiny_instance, indoor_demo_scene

__version__ = "0.1.0"
