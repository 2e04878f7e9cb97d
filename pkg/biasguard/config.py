"""Configuration constants for the engine."""
import os
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

from biasguard.errors import ContractViolation

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    env_path = Path(__file__).resolve().parents[1] / ".env"
    if env_path.exists():
        for line in env_path.read_text(encoding="utf-8").splitlines():
            if not line or line.lstrip().startswith("#"):
                continue
            if "=" not in line:
                continue
            key, value = line.split("=", 1)
            key = key.strip()
            value = value.strip()
            if key and value and key not in os.environ:
                os.environ[key] = value

# Ablation parallelism cap
THREADS: int = max(1, int(os.getenv("BIASGUARD_THREADS", "1")))
LOG_LEVEL: str = os.getenv("BIASGUARD_LOG_LEVEL", "INFO").upper()

DEFAULT_SEED: int = int(os.getenv("BIASGUARD_SEED", "7"))

# Optimizer
DEFAULT_LR: float = 1e-3
ADAM_BETA1: float = 0.9
ADAM_BETA2: float = 0.999
ADAM_EPS: float = 1e-8

# Training loop
DEFAULT_BATCH_SIZE: int = 32
DEFAULT_EPOCHS: int = 20
LAMBDA_GP: float = 10.0
N_CRITIC: int = 5
# Added under the square root of the penalty norm; a zero gradient gives a norm of 1e-6
GRAD_NORM_EPS: float = 1e-12

# Metric construction
DEFAULT_METRIC_EPS: float = 1e-3
PINV_TOL: float = 1e-10
SYMMETRY_TOL: float = 1e-8
CHOLESKY_SHIFTS: Tuple[float, ...] = (0.0, 1e-12, 1e-10, 1e-8)
LOG_EPS: float = 1e-8

# Desk profile (full-scale profile: d_latent=500, k_proj=900)
DESK_D_VISUAL: int = 64
DESK_K_SEMANTIC: int = 16
DESK_D_LATENT: int = 16
DESK_K_PROJ: int = 24
FULL_D_LATENT: int = 500
FULL_K_PROJ: int = 900

# Synthetic data defaults
DESK_CLASSES: int = 10
DESK_UNSEEN: int = 3
DESK_PER_CLASS: int = 50
DEFAULT_TEST_FRACTION: float = 0.2


def parse_key_value_text(text: str) -> Dict[str, Tuple[str, int]]:
    """
    Parse key=value lines.

    Args:
        text: UTF-8 text, one ``key=value`` per line, ``#`` comments allowed

    Returns:
        Mapping of key to (value, line number)
    """
    items: Dict[str, Tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise ContractViolation(f"line {lineno}: expected key=value, got {line.strip()!r}")
        key, value = line.split("=", 1)
        items[key.strip()] = (value.strip(), lineno)
    return items


def load_config_file(path: str, allowed_keys: Optional[Iterable[str]] = None) -> Dict[str, str]:
    """
    Load a key=value config file, rejecting unknown keys.

    Args:
        path: Config file path
        allowed_keys: Keys accepted; None accepts everything

    Returns:
        Mapping of key to raw string value
    """
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ContractViolation(f"{path}: config file is not valid UTF-8 (byte {exc.start})") from exc
    parsed = parse_key_value_text(text)
    if allowed_keys is not None:
        allowed = set(allowed_keys)
        for key, (_, lineno) in parsed.items():
            if key not in allowed:
                raise ContractViolation(f"{path}:{lineno}: unknown config key {key!r}")
    return {key: value for key, (value, _) in parsed.items()}
