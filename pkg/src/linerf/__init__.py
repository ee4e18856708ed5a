"""Volume rendering with per-sample or integrated-feature color decoding.

The classic estimator decodes color at every quadrature sample and averages
with the rendering weights; the integrated estimator averages positional
features along the ray and decodes once. This package implements both (plus
the split renderer interpolating between them), trains them on analytic
scenes, and verifies the second-order error bounds separating them.
"""

__version__ = "0.1.0"

from .bounds import (
    BoundReport,
    PerturbationSet,
    QuadraticDecoder,
    affine_decoder,
    bound_reports_for_rays,
    hessian_fd,
    ray_bound_report,
    spectral_norm,
    taylor_exactness_check,
    taylor_terms,
    upper_bounds,
    verify_bound_dominance,
)
from .data import Dataset, Image, load_dataset, read_image, srgb_decode, srgb_encode, write_image
from .errors import (
    ConfigurationError,
    DataError,
    FormatError,
    InputError,
    LinerfError,
    TrainingError,
    VerificationError,
)
from .field import (
    Background,
    FieldConfig,
    FieldModel,
    GridConfig,
    ShConfig,
    SinusoidalConfig,
    encode_direction,
    encode_position,
    load_model,
    save_model,
    sh_basis,
    split_trunk,
)
from .net import AdamState, LayerSpec, NetParams, adam_step, init_net, load_net, net_backward, net_forward, save_net
from .render import (
    EPS_FG,
    Ray,
    RenderConfig,
    compute_weights,
    parse_renderer,
    ray_embedding,
    render_classic,
    render_image,
    render_linerf,
    render_rays,
    render_rays_grad,
    render_split,
    stratified_sample,
)
from .scenes import (
    A_SHELL,
    AnalyticField,
    Camera,
    DiracDensityField,
    Scene,
    analytic_density,
    camera_rays,
    gen_dataset,
    gt_radiance,
    look_at,
    make_glossy_scene,
    make_matte_scene,
    nearest_surface,
)
from .train import CompareResult, EvalReport, TrainConfig, TrainResult, compare, evaluate, psnr, ssim, train
