"""Centralized constants for the energy aligning toolkit."""

# Cosine-head logit scale when none is configured
DEFAULT_COSINE_SCALE = 16.0

# Knowledge distillation temperature used by every recipe
DEFAULT_TEMPERATURE = 2.0

# SGD momentum of the default optimizer
DEFAULT_MOMENTUM = 0.9

# CIL loss balance and weight-decay decay factor
DEFAULT_LAMBDA_BASE = 1.0
DEFAULT_WEIGHT_DECAY_FACTOR = 0.5

# Many/Medium/Few boundaries on training counts (Many: > 100, Few: < 20)
MANY_SHOT_THRESHOLD = 100
FEW_SHOT_THRESHOLD = 20

# Cluster counts tried by automatic selection
DEFAULT_CANDIDATE_CLUSTERS = (1, 2, 3, 4, 5)

# Sampling-set augmentation: jitter sigma as a fraction of per-dimension train std
DEFAULT_JITTER_SCALE = 0.1
DEFAULT_REPLICATION = 8
DEFAULT_SAMPLES_PER_CLASS = 20

# Logit binary file layout
LOGIT_MAGIC = b"EALG"
LOGIT_VERSION = 1
LOGIT_FLAG_LABELS = 0x01

# Checkpoint format tag stored in the JSON header
CHECKPOINT_FORMAT = "ea-mlp/1"

# Spread below which an energy vector counts as flat for rank correlation
FLAT_TOLERANCE = 1e-9

# Norm floor for the cosine head
COSINE_EPS = 1e-12

# Log line layout shared by the entry script and the CLI
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s:%(filename)s:%(lineno)d %(message)s"
DEFAULT_LOG_LEVEL = "WARNING"
LOG_LEVEL_KEY = "EA_LOG_LEVEL"

# Run directory file names
CONFIG_FILE = "config.json"
METRICS_FILE = "metrics.json"
SHIFTS_FILE = "shifts.json"
CHECKPOINT_FILE = "checkpoint"
TRACES_FILE = "traces.csv"
ENERGY_FILE = "energy_per_class.csv"
CONFUSION_FILE = "confusion.csv"
CONFUSION_LOG_FILE = "confusion_log1p.csv"
