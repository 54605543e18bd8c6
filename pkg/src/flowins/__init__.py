"""Optical-flow aided inertial navigation: EKF, RTS smoother, simulator and tools."""

from .dataset import Dataset, ImuStream, InitialPose
from .estimator import FlowAidedINS, ProcrustesAligner
from .evaluation import AblationResults, emit_plots, procrustes_align, rmse, run_ablation
from .flow_fusion import (FlowField, FlowPoint, GatingConfig, augment_pose,
                          ekf_update_flow_point, flow_residual, forget_pose,
                          process_flow_field)
from .flowio import (FlowSampleStack, align_streams, flow_variance_from_stack, read_dataset,
                     read_flow, write_dataset, write_flow)
from .geometry import CameraModel, forward_camera, projection_matrix, triangulate
from .gnss import EnuOrigin, GnssConfig, GnssFix, ekf_update_gnss, wgs_to_enu
from .ins import (ImuSample, ProcessNoiseConfig, StateEstimate, StatePrior, ekf_predict,
                  initialize_stationary, mechanize)
from .pipeline import TABLE_CONFIGS, AblationConfig, FilterSettings, dead_reckon, run_filter
from .simulator import NoiseSpec, TrajectorySpec, simulate_dataset
from .smoother import FilterHistory, rts_smooth, rts_smooth_states
from .trajectory import TrajectoryEstimate

__version__ = "0.1.0"
