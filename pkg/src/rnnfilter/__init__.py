"""State estimation of noisy dynamical systems with recurrent networks,
benchmarked against Kalman filtering.

The package generates noisy trajectory datasets for three benchmark
systems, trains Jordan- and Elman-style recurrent estimators (simple and
LSTM cells) with exact backpropagation through time, runs KF/EKF baselines,
and reports error curves, NMSE and timing, including out-of-training-region
evaluation. See the ``rnnfilter`` CLI for end-to-end experiment runs.
"""

from .dynamics import (Dataset, SystemModel, Trajectory, generate_dataset,
                       generate_trajectory, get_model, load_dataset,
                       pendulum_model, rk4_step, save_dataset, springs_model,
                       vdp_model, zoh_discretize)
from .evaluation import (FilterEstimator, NetworkEstimator, error_curve,
                         evaluate, nmse, out_of_region_testset)
from .filters import (EKF, KF, FilterState, ekf_init, ekf_step, kf_init,
                      kf_step, run_filter)
from .networks import (NetworkConfig, NetworkParams, NetworkState,
                       bptt_gradients, count_params, forward_sequence,
                       init_params, load_checkpoint, save_checkpoint)
from .training import TrainConfig, TrainRecord, adam_update, preset_configs, train

__version__ = "0.1.0"
