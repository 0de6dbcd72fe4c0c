"""
MyoTrack - Configuration Settings
All registration, strain and phantom defaults in one place
"""
import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# =============================================================================
# PATH CONFIGURATION
# =============================================================================

BASE_DIR = Path(__file__).resolve().parent.parent

# =============================================================================
# LOGGING
# =============================================================================

LOG_FILE = Path(os.getenv("CINE_LOG_FILE", str(BASE_DIR / "myotrack.log")))
LOG_LEVEL = os.getenv("CINE_LOG_LEVEL", "INFO")
LOG_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {message}"

# =============================================================================
# IMAGING
# =============================================================================

PYRAMID_FACTOR = 2               # fixed; mesh prolongation assumes it
MIN_LEVEL_SIZE = 4               # smallest admissible pyramid level, per axis
BINOMIAL_KERNEL = (1.0, 4.0, 6.0, 4.0, 1.0)
CATMULL_ROM_A = -0.5

# =============================================================================
# REGISTRATION DEFAULTS (simulated dataset)
# =============================================================================

PYRAMID_LEVELS = 3
COARSEST_PATCH_SIZE = 5          # doubled at each finer level
COARSEST_PATCH_SPACING = 3
CONTROL_POINT_SPACING = 6        # pixels, reused in each level's own pixel units
SPATIAL_WEIGHT = 6e-4            # lambda
TEMPORAL_WEIGHT = 0.06           # mu
RELATIVE_TOLERANCE = 1e-5
MAX_ITERATIONS_PER_LEVEL = 500
INITIAL_STEP = 1.0               # max control-point move per step, pixels
BACKTRACK_FACTOR = 0.5
MIN_STEP = 1e-8
SINGULAR_VALUE_CUTOFF = 1e-12    # relative to sigma_max

# lambda/mu are never reweighted between levels.
PRESETS = {
    "simulated": {
        "control_spacing": 6,
        "spatial_weight": 6e-4,
        "temporal_weight": 0.06,
    },
    "invivo": {
        "control_spacing": 7,
        "spatial_weight": 1e-3,
        "temporal_weight": 0.1,
    },
}
DEFAULT_PRESET = "simulated"

METRICS = ("llr", "glr", "variance", "pairwise")

# Thread pool for patchwise SVDs. Deterministic runs force 1.
WORKERS = max(1, int(os.getenv("CINE_WORKERS", "1")))
DEFAULT_SEED = 42

# =============================================================================
# TRANSFORM INVERSION
# =============================================================================

INVERSION_TOLERANCE = 1e-3       # px, max fixed-point update
INVERSION_MAX_ITERATIONS = 50
INVERSION_WARN_RESIDUAL = 0.1    # px

# =============================================================================
# STRAIN
# =============================================================================

STRAIN_EROSION_PX = 2
SEGMENT_CHOICES = (4, 6)
DEFAULT_SEGMENTS = 6
DEFAULT_REFERENCE_ANGLE = 0.0    # radians

# =============================================================================
# PHANTOM
# =============================================================================

PHANTOM_SIZE = 64
PHANTOM_FRAMES = 24
PHANTOM_INNER_RADIUS = 10.0
PHANTOM_OUTER_RADIUS = 18.0
PHANTOM_AMPLITUDE = 0.2
PHANTOM_MODE = "incompressible"
PHANTOM_NOISE = 0.01             # fraction of the clean dynamic range
PHANTOM_TAPER = 6.0
PHANTOM_PIXEL_SPACING = 1.5      # mm
PHANTOM_EDGE_WIDTH = 0.5         # px, logistic softening of tissue borders

# Per-tissue base intensity before min-max scaling.
PHANTOM_TISSUE_INTENSITY = {
    "blood": 0.9,
    "myocardium": 0.3,
    "background": 0.55,
}

# (kx, ky) in radians per pixel, amplitude. None of them axis-aligned.
PHANTOM_TEXTURE = (
    ((0.55, 0.35), 0.08),
    ((-0.30, 0.62), 0.06),
    ((0.21, -0.47), 0.05),
)

# Texture weight per tissue; the blood pool is untextured by default.
PHANTOM_TEXTURE_WEIGHT = {
    "blood": 0.0,
    "myocardium": 1.0,
    "background": 1.0,
}

# =============================================================================
# FORMATS
# =============================================================================

FORMAT_VERSION = 1
