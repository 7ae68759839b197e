# Command Constants
CMD_TRAIN = "train"
CMD_GRID = "grid"
CMD_ORACLE = "oracle"
CMD_CHECK = "check"

# Optimizer Kinds
OPT_SGD = "sgd"
OPT_SGD_MOMENTUM = "sgd_momentum"
OPT_ADAM = "adam"
OPT_ADAGRAD = "adagrad"
OPTIMIZER_KINDS = (OPT_SGD, OPT_SGD_MOMENTUM, OPT_ADAM, OPT_ADAGRAD)

# Training Modes
MODE_AUTO = "auto"
MODE_FIXED = "fixed"

# Controller modes for AdaGrad
ADAGRAD_ALPHA_ONLY = "alpha_only"
ADAGRAD_FULL = "full"

# Layer Kinds
LAYER_DENSE = "dense"
LAYER_CONV2D = "conv2d"
LAYER_MAXPOOL2D = "maxpool2d"
LAYER_RELU = "relu"
LAYER_DROPOUT = "dropout"
LAYER_FLATTEN = "flatten"
LAYER_LOGSOFTMAX = "logsoftmax"

# Forward modes
TRAIN = "train"
EVAL = "eval"

# Architectures / datasets
ARCH_MNIST = "mnist_cnn"
ARCH_CIFAR = "cifar_cnn"
ARCH_TINY = "tiny_mlp"
DATASET_MNIST = "mnist"
DATASET_CIFAR10 = "cifar10"

# Precision
PRECISION_F64 = "f64"
PRECISION_F32 = "f32"

# Trace flags
FLAG_WARMUP = "warmup"
FLAG_SINGULAR = "singular"
FLAG_ILL_CONDITIONED = "ill_conditioned"
FLAG_FROZEN = "frozen"
FLAG_CLAMPED = "clamped"

# CSV schemas (name, version, columns)
SCHEMA_METRICS = ("metrics", 1, ["seed", "epoch", "step", "train_loss", "train_error", "test_error", "wall_time_s"])
SCHEMA_TRACE = ("trace", 1, ["seed", "step", "group", "alpha", "beta", "gamma1", "gamma2", "vhat", "a11", "a12", "a22", "flags"])
SCHEMA_GRID = ("grid_summary", 1, ["alpha", "beta", "seeds", "train_error_mean", "train_error_std",
                                   "test_error_mean", "test_error_std", "best"])
SCHEMA_SURFACE = ("oracle_surface", 1, ["gamma1", "gamma2", "analytic_loss", "monte_carlo_loss"])
SCHEMA_ORACLE = ("oracle_compare", 1, ["source", "gamma1", "gamma2", "grid_cells_off", "agrees"])
SCHEMA_CHECK = ("check_report", 1, ["suite", "passed", "measured", "threshold", "detail"])

# Baseline grids
GRID_LEARNING_RATES = tuple(10.0 ** (-4 + 0.5 * k) for k in range(9))
GRID_MOMENTA = (0.0, 0.3, 0.8, 0.9, 0.95, 0.99)

# Controller defaults
DEFAULT_UPSILON = 0.9
DEFAULT_RIDGE = 1e-8
DEFAULT_ALPHA_MIN = 1e-8
DEFAULT_BETA_MAX = 0.999
DEFAULT_WARMUP_STEPS = 1
# det(A)/(a11 a22) below this: the two columns are too close to parallel for a 2-D solve
DEFAULT_MIN_REL_DET = 0.1
ALPHA_MAX = {OPT_SGD: 10.0, OPT_SGD_MOMENTUM: 10.0, OPT_ADAM: 1.0, OPT_ADAGRAD: 1.0}
INIT_ALPHA = {OPT_SGD: 0.01, OPT_SGD_MOMENTUM: 0.01, OPT_ADAM: 0.001, OPT_ADAGRAD: 0.001}

# Optimizer defaults
DEFAULT_ADAM_BETA2 = 0.99
DEFAULT_EPS = 1e-8

# Testbed defaults
TESTBED_GRID_LOW = -0.5
TESTBED_GRID_HIGH = 1.0
TESTBED_GRID_STEP = 0.02
TESTBED_DRAWS = 10_000
ORACLE_DIMS = (2, 5, 10)
# noise ratio of the oracle-equivalence instances; the batch-mean ratio estimate is biased by O(ratio / dim)
ORACLE_NOISE_RATIO = 0.03
ORACLE_MIN_AGREEMENT = 0.9

DIVERGENCE_FACTOR = 1e6
MATERIALIZE_PARAM_CEILING = 100_000

# Plan step types
STEP_TRAIN_SEED = "train_seed"
STEP_GRID_CELL = "grid_cell"
STEP_ORACLE = "oracle_testbed"
STEP_CHECK_SUITE = "check_suite"

# Check suites
CHECK_SUITES = ("gradcheck", "per_sample", "unbiasedness", "oracle", "newton", "ewma", "scale", "complexity")
CHECK_SUITES_FULL = ("trend", "table")

# Exit codes
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_DIVERGED = 2

SCHEMA_TESTBED = ("testbed_training", 1, ["run", "alpha", "final_loss", "mean_alpha", "diverged"])
THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
SCHEMA_GRID_RUNS = ("grid_runs", 1, ["alpha", "beta", "seed", "train_error", "test_error", "diverged"])
TESTBED_BASELINE_ALPHAS = (0.01, 0.1, 0.5, 1.0)
DATA_SEED = 0
DEFAULT_LOG_FILE = "autoopt.log"
