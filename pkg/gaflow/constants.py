# Set of constants shared by various modules

# Process exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_IO_ERROR = 2
EXIT_NUMERICAL_ERROR = 3

# Channel contract of a try-on sample
CHANNELS_IMAGE = 3
CHANNELS_MASK = 1
CHANNELS_SHAPE = 1
CHANNELS_POSE = 18
CHANNELS_HEAD = 3
CHANNELS_BODYPART = 11
CHANNELS_CLOTHING = 7
CHANNELS_UV = 2
CHANNELS_FLOW = 2
CHANNELS_PRIORS = CHANNELS_SHAPE + CHANNELS_POSE + CHANNELS_HEAD + CHANNELS_BODYPART

# Offset of the dense body-part block inside I_priors
PRIORS_BODYPART_OFFSET = CHANNELS_SHAPE + CHANNELS_POSE + CHANNELS_HEAD

# Clothing segmentation classes
CLOTH_BACKGROUND = 0
CLOTH_GARMENT = 1
CLOTH_HEAD = 2
CLOTH_LEFT_ARM = 3
CLOTH_RIGHT_ARM = 4
CLOTH_LOWER_BODY = 5
CLOTH_SKIN = 6

# Body-part classes
BP_BACKGROUND = 0
BP_HEAD = 1
BP_NECK = 2
BP_TORSO = 3
BP_LEFT_UPPER_ARM = 4
BP_LEFT_LOWER_ARM = 5
BP_RIGHT_UPPER_ARM = 6
BP_RIGHT_LOWER_ARM = 7
BP_HIPS = 8
BP_LEFT_LEG = 9
BP_RIGHT_LEG = 10

# Fusion net output split: I_rp, M_out, M_exp_pred, M_bp_pred, I_uv_pred
FUSION_SPLIT = (CHANNELS_IMAGE, CHANNELS_MASK, CHANNELS_CLOTHING,
                CHANNELS_BODYPART, CHANNELS_UV)

DEFAULT_CLASS_WEIGHTS = (3.0, 1.0, 1.0, 1.0, 3.0, 1.0, 1.0)

# Floor applied to probabilities before taking logarithms.
LOG_FLOOR = 1e-8

# Seed of the frozen feature extractor used by the perceptual loss.
PERCEPTUAL_SEED = 20201
