"""Reference-based texture-transfer super-resolution.

Texture features come from a 2D wavelet scattering transform; an
unpaired high-resolution reference supplies matched feature patches that
are concatenated into a small SR network trained with reconstruction,
perceptual and texture losses.
"""

from .errors import (
    DataError,
    NumericError,
    ShapeError,
    TexsrError,
    UsageError,
)
from .image_core import (
    PatchGrid,
    assemble_patches,
    bicubic_resize,
    degrade,
    extract_patches,
    load_image,
    load_tensor,
    save_image,
    save_tensor,
)
from .losses import (
    LossConfig,
    LossWeights,
    PerceptualExtractor,
    gram,
    loss_perceptual,
    loss_rec,
    loss_texture,
    loss_total,
)
from .metrics import PairedScores, WilcoxonResult, psnr, ssim, wilcoxon_signed_rank
from .model import (
    AdamState,
    ConvLayer,
    Network,
    adam_step,
    backward,
    forward,
    init_srcnn,
    load_checkpoint,
    save_checkpoint,
)
from .pipeline import (
    TrainConfig,
    evaluate,
    infer,
    load_config,
    precompute_swaps,
    prepare_dataset,
    train,
)
from .scattering import (
    FilterBank,
    ScatterConfig,
    build_filter_bank,
    littlewood_paley,
    scatter,
    scatter_batch,
    scatter_vjp,
    scatter_with_tape,
)
from .texture_transfer import (
    MatchMap,
    ReferencePool,
    build_reference_pool,
    dense_match,
    match_visualization,
    save_match_map,
    similarity,
    swap_features,
    swap_with_pool,
    transfer,
)

__version__ = "0.1.0"
