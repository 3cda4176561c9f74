from .dataset import (
    Dataset,
    DatasetError,
    SampleRecord,
    generate_samples,
    make_sample,
    parse_splits,
    read_dataset,
    write_dataset,
)
from .render import render_bev_gt, render_fv
from .scene import (
    DEFAULT_CLASSES,
    NUSCENES_CLASSES,
    Box,
    GroundRegion,
    Scene,
    SceneConfig,
    SceneConfigError,
    sample_scene,
)
