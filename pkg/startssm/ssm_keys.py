SAMPLE_DIM = 'sample'
TOKEN_DIM = 'token'
CHANNEL_DIM = 'channel'
STATE_DIM = 'state'
DOMAIN_ATTR = 'domain_id'

DISCRETIZATION_ZOH = 'zoh'
DISCRETIZATION_EULER = 'euler'
DISCRETIZATION_MODES = (DISCRETIZATION_ZOH, DISCRETIZATION_EULER)

SCAN_SEQUENTIAL = 'sequential'
SCAN_PARALLEL = 'parallel'
SCAN_METHODS = (SCAN_SEQUENTIAL, SCAN_PARALLEL)

VARIANT_START_M = 'start_m'
VARIANT_START_X = 'start_x'
VARIANT_START_MX = 'start_mx'
VARIANT_RANDOM_TOKEN = 'random_token'
VARIANT_FULL_SEQUENCE = 'full_sequence'
VARIANT_NONE = 'none'
VARIANTS = (VARIANT_START_M, VARIANT_START_X, VARIANT_START_MX, VARIANT_RANDOM_TOKEN,
            VARIANT_FULL_SEQUENCE, VARIANT_NONE)

# spellings accepted on the command line
CLI_VARIANT_NAMES = {
    'none': VARIANT_NONE,
    'start-m': VARIANT_START_M,
    'start-x': VARIANT_START_X,
    'start-mx': VARIANT_START_MX,
    'random-token': VARIANT_RANDOM_TOKEN,
    'full-seq': VARIANT_FULL_SEQUENCE,
}

GAMMA_MEDIAN = 'median'

QUANTITY_DELTA = 'delta'
QUANTITY_B = 'B'
QUANTITY_C = 'C'
QUANTITY_FEATURES = 'features'
QUANTITY_INPUTS = 'inputs'
GAP_QUANTITIES = (QUANTITY_DELTA, QUANTITY_B, QUANTITY_C, QUANTITY_FEATURES, QUANTITY_INPUTS)

SECTION_SYNTH = 'synth'
SECTION_MODEL = 'model'
SECTION_TRAIN = 'train'
SECTION_AUGMENT = 'augment'
SECTION_EXPERIMENT = 'experiment'

METRICS_COLUMNS = ['seed', 'held_out_domain', 'variant', 'epoch', 'train_loss', 'target_acc']
GAP_COLUMNS = ['quantity', 'domain_a', 'domain_b', 'value', 'gamma']
BENCH_COLUMNS = ['L', 'variant', 'ns_per_token']

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
