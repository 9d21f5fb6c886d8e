# Default settings for experiments (override any of them in the YAML config file)

import os

# Where run directories are created (runs/<run_id>/...)
RUNS_DIR = os.getenv('DOMPROJ_RUNS_DIR', 'runs')

# Torch device used when the config does not name one
DEVICE = os.getenv('DOMPROJ_DEVICE', 'cpu')

# Image geometry
IMAGE_RESOLUTION = 64  # desk scale, full runs use 128 or 256
NUM_CHANNELS = 3

# Problem size
NUM_DOMAINS = 3  # S, number of source domains
NUM_CLASSES = 2

# Translation model
STYLE_DIM = 64
LATENT_DIM = 16  # not given for the full-scale runs, free parameter
GENERATOR_CHANNELS = 16  # width of the first generator stage, doubled per downsampling
ENCODER_CHANNELS = 16  # same for style encoder and discriminator trunks
MAX_CHANNELS = 128
NUM_RES_BLOCKS = 2
MAPPING_HIDDEN = 64

# Loss weights, all 1.0 for the full-scale runs
LAMBDA_ADV = 1.0
LAMBDA_CYC = 1.0
LAMBDA_DS = 1.0
LAMBDA_PERCEP = 1.0
LAMBDA_STY = 1.0
LAMBDA_GP = 1.0
DS_DECAY_STEPS = 2000  # only used when ds_decay is on

# Optimisation
LEARNING_RATE = 1e-4
BETA1 = 0.0
BETA2 = 0.99
EMA_BETA = 0.999

# Training budgets (desk scale)
TRANSLATION_BATCH_SIZE = 8
TRANSLATION_STEPS = 2000
CLASSIFIER_BATCH_SIZE = 32
CLASSIFIER_STEPS = 1000

# Train-time augmentation
P_AUG = 0.5  # probability an image is replaced by its translation

# Color jitter magnitudes, shared by train-time jitter and jitter TTA
JITTER_VIEWS = 8
JITTER_BRIGHTNESS = 0.2
JITTER_CONTRAST = 0.2
JITTER_SATURATION = 0.2
JITTER_HUE = 0.05
HE_JITTER_ALPHA = 0.05
HE_JITTER_BETA = 0.05

# Logging and checkpoint cadence (in steps)
LOG_EVERY = 100
CHECKPOINT_EVERY = 500

# Evaluation
EVAL_BATCH_SIZE = 32

# Number of dihedral views used by geometric TTA
GEOMETRIC_VIEWS = 8
