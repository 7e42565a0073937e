# app/utils/validators.py
# Validation of command-line arguments and results directories
# Every validator returns (is_valid, errors) so a command can report all
# problems at once before raising

from pathlib import Path

from .error_handler import DataValidationError


# Files a stage needs from the stages before it
STAGE_INPUTS = {
    'stage1': [],
    'distill': ['views/manifest.json'],
    'stage3': ['views/manifest.json'],
    'eval': ['views/manifest.json'],
    'edit-preview': ['views/manifest.json'],
}


def validate_distill_options(alpha=None, iters=None, lr=None, omega=None, cfg_teacher=None):
    """
    Stage-2 overrides given on the command line

    Returns:
        tuple: (is_valid, errors_list)
    """
    errors = []
    if alpha is not None and alpha < 0:
        errors.append(f"--alpha must be >= 0, got {alpha}")
    if iters is not None and iters < 1:
        errors.append(f"--iters must be >= 1, got {iters}")
    if lr is not None and lr <= 0:
        errors.append(f"--lr must be > 0, got {lr}")
    if omega is not None and omega not in ('const', 'sigma_sq'):
        errors.append(f"--omega must be 'const' or 'sigma_sq', got {omega!r}")
    if cfg_teacher is not None and cfg_teacher < 1.0:
        errors.append(f"--cfg-teacher must be >= 1, got {cfg_teacher}")
    return len(errors) == 0, errors


def validate_stage3_options(mask=None, iters=None, l1=None, perc=None):
    errors = []
    if mask is not None and mask not in ('none', 'gt'):
        errors.append(f"--mask must be 'none' or 'gt', got {mask!r}")
    if iters is not None and iters < 0:
        errors.append(f"--iters must be >= 0, got {iters}")
    for name, value in (('--l1', l1), ('--perc', perc)):
        if value is not None and value < 0:
            errors.append(f"{name} must be >= 0, got {value}")
    if l1 is not None and perc is not None and l1 == 0 and perc == 0:
        errors.append("--l1 and --perc cannot both be 0")
    return len(errors) == 0, errors


def validate_run_options(seeds, workers):
    """
    Seeds of a multi-seed run must be distinct non-negative integers

    Returns:
        tuple: (is_valid, errors_list)
    """
    errors = []
    if not seeds:
        errors.append("at least one seed is required")
    if any(s < 0 for s in seeds):
        errors.append("seeds must be non-negative")
    if len(set(seeds)) != len(seeds):
        errors.append(f"seeds must be distinct, got {list(seeds)}")
    if workers < 1:
        errors.append(f"--workers must be >= 1, got {workers}")
    return len(errors) == 0, errors


def validate_results_dir(out, stage):
    """
    Check that the inputs a stage reads from the results directory exist

    Returns:
        tuple: (is_valid, errors_list)
    """
    out = Path(out)
    errors = [f"{out / name} is missing (run the earlier stages first)"
              for name in STAGE_INPUTS.get(stage, []) if not (out / name).exists()]
    return len(errors) == 0, errors


def parse_seeds(text):
    """'0,1,2' or '0-4' → list of ints"""
    try:
        if '-' in text and ',' not in text:
            low, high = (int(part) for part in text.split('-', 1))
            return list(range(low, high + 1))
        return [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise DataValidationError(f"cannot parse seeds {text!r} (use '0,1,2' or '0-4')")


def ensure_valid(result):
    """Raise DataValidationError listing every error of a (is_valid, errors) pair"""
    is_valid, errors = result
    if not is_valid:
        raise DataValidationError("; ".join(errors))
