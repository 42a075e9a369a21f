"""Part-compositional neural SDF/radiance body generator."""

__version__ = "0.1.0"

from .body import (
    BodyModel,
    Pose,
    PosedBody,
    Shape,
    deform,
    forward_kinematics,
    inverse_lbs,
    load_body_json,
    make_toy_body,
    save_body_json,
)
from .fields import (
    GeneratorNet,
    TemplateSdf,
    build_generator,
    field_gradients,
    normalize_local,
    query_composite,
    sdf_to_density,
    window_weight,
)
from .geometry import (
    Camera,
    PartBoxSet,
    canonical_part_boxes,
    filter_rays,
    frontal_camera,
    generate_rays,
    pose_boxes,
    ray_obb_intersect,
)
from .render import RenderConfig, RenderOutput, integrate_ray, render, stratified_samples
from .sampling import (
    DatasetMeta,
    PoseSampler,
    SamplerConfig,
    head_facing_angle,
    pose_guided_weights,
    sample_batch,
    sample_latent,
)
from .training import (
    Discriminator,
    TrainConfig,
    Trainer,
    augment,
    d_loss,
    eikonal_loss,
    f_logistic,
    g_loss,
    offset_loss,
    r1_penalty,
    r1_schedule,
)

__all__ = [name for name in dir() if not name.startswith("_")]
