import os


base_dir = os.path.dirname(os.path.abspath(__file__))
default_scene = os.path.join(base_dir, '..', 'data', 'scene.txt')

WARMUP_CHECKPOINT = 'warmup.ckpt'
ADAPTED_CHECKPOINT = 'adapted.ckpt'
PSEUDO_LABEL_DIR = 'pseudo_labels'
CORRECTED_LABEL_DIR = 'pseudo_labels_corrected'
PAIRS_FILE = 'pairs.tsv'
TRAINING_LOG = 'training_log.csv'
REPORT_FILE = 'report.csv'

# exit codes
EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VERIFY_FAILED = 2
