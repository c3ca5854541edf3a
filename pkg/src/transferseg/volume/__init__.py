from .features import SamplingMode, eligible_rows, extract_features, sample_bag
from .filters import (
    gaussian_kernel,
    gaussian_smooth,
    gradient_magnitude,
    invert_intensities,
    laplacian,
    percentile,
    percentile_normalize,
)
from .io import read_mask, read_volume, write_mask, write_volume
from .phantom import (
    CSF,
    GM,
    LESION,
    TISSUE_NAMES,
    WM,
    PhantomGeometry,
    apply_scanner,
    shell_scales,
    simulate_phantom,
)
from .types import (
    BT_RECIPE,
    WML_RECIPE,
    DegenerateInputError,
    FeatureRecipe,
    Mask,
    SampleBag,
    ScannerProfile,
    Volume,
)
