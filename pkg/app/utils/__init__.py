from .error_handler import handle_errors, setup_logging
from .validators import ensure_valid, parse_seeds, validate_results_dir
from .helpers import derive_seed, torch_generator
