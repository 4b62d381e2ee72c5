"""safeflow: certified ball-mapping diffeomorphisms for safe motion generation.

Learn a bi-Lipschitz map sending a complex 2D safe set onto the unit ball,
then generate goal-conditioned motions as straight lines in the transformed
space: exponentially stable, velocity-bounded, and forward invariant on the
learned set for every start/goal pair, with an executable certificate suite.
"""

from .bilip import BiLipMap, CertBounds, NonConvergence, PlannerModel
from .env import Circle, Environment, Rect, corridor_v1, load_environment, make_corridor_env
from .flow import (
    FlowConfig,
    NumericalFailure,
    ShearMap,
    Trajectory,
    example1_compare,
    find_gradient_flow_exit,
    finite_time_field,
    gradient_flow_field,
    integrate_field,
    natural_field,
    piecewise_linear_path,
    circle_path,
    rollout_analytic,
    rollout_rk4,
    shear_forward,
    shear_inverse,
    shear_jacobian,
    tracking_rollout,
)
from .roadmap import (
    LabeledDatasets,
    Roadmap,
    assemble_datasets,
    build_knn_graph,
    cost_to_go,
    load_datasets,
    rrt_grow,
    save_datasets,
)
from .train import (
    Adam,
    TrainConfig,
    TrainReport,
    calibrate_level,
    demo_loss,
    demo_loss_grad,
    lyapunov_value,
    separation_loss,
    separation_loss_grad,
    separation_margins,
    suggest_out_scale,
    train,
)
from .verify import (
    CertificateReport,
    check_ball_invariance,
    check_barrier,
    check_bilip,
    check_convergence,
    check_finite_time_band,
    check_safety_env,
    check_tracking,
    check_velocity,
    run_full_suite,
)

__version__ = "0.1.0"
