"""Crash-safe training: keep the last good checkpoint and flush it on abort or signal."""
import logging
import os
import signal
import sys
import threading
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Union

from biasguard.checkpoint import encode_checkpoint
from biasguard.errors import BiasGuardError, TrainingAborted
from biasguard.pipeline import Checkpoint

logger = logging.getLogger(__name__)

LASTGOOD_SUFFIX = ".lastgood"
INTERRUPTED_EXIT = 130


def lastgood_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + LASTGOOD_SUFFIX)


def atomic_write(path: Union[str, Path], payload: bytes) -> Path:
    """Write through a temporary sibling and rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    return path


class CrashSafeOrchestrator:
    """Orchestrator with crash recovery for a training run."""

    def __init__(self, output_path: Union[str, Path], install_signals: bool = True):
        self.output_path = Path(output_path)
        self.checkpoint_file = lastgood_path(self.output_path)
        self.last_good: Optional[Checkpoint] = None
        self._previous: Dict[int, Any] = {}
        if install_signals:
            self.setup_signal_handlers()

    def record(self, checkpoint: Checkpoint) -> None:
        """Epoch callback: remember the latest completed checkpoint."""
        self.last_good = checkpoint

    def setup_signal_handlers(self) -> None:
        """Flush the last good checkpoint on SIGINT/SIGTERM, then exit."""
        if threading.current_thread() is not threading.main_thread():
            logger.debug("[RECOVERY] not on the main thread, signal handlers left alone")
            return

        def signal_handler(sig, frame):
            try:
                saved = self.save_checkpoint()
                if saved is not None:
                    print(f"interrupted: last good checkpoint written to {saved}", file=sys.stderr)
            except (OSError, BiasGuardError) as exc:
                logger.error(f"[RECOVERY] could not save on signal {sig}: {exc}")
            sys.exit(INTERRUPTED_EXIT)

        for sig in (signal.SIGINT, signal.SIGTERM):
            self._previous[sig] = signal.signal(sig, signal_handler)

    def restore_signal_handlers(self) -> None:
        for sig, handler in self._previous.items():
            signal.signal(sig, handler)
        self._previous.clear()

    def save_checkpoint(self, checkpoint: Optional[Checkpoint] = None) -> Optional[Path]:
        """
        Save the given (or last recorded) checkpoint to the ``.lastgood`` path.

        Args:
            checkpoint: Checkpoint to save; defaults to the last recorded one

        Returns:
            Path written, or None when there is nothing to save
        """
        checkpoint = checkpoint or self.last_good
        if checkpoint is None:
            return None
        path = atomic_write(self.checkpoint_file, encode_checkpoint(checkpoint))
        logger.warning(f"[RECOVERY] last good checkpoint (epoch {checkpoint.epoch}) saved to {path}")
        return path

    def __enter__(self) -> "CrashSafeOrchestrator":
        return self

    def __exit__(self, *exc_info) -> None:
        self.restore_signal_handlers()


def run_guarded(train_fn: Callable[[Callable[[Checkpoint], None]], Checkpoint],
                output_path: Union[str, Path], install_signals: bool = True) -> Checkpoint:
    """
    Run ``train_fn(on_epoch)`` under an orchestrator.

    On TrainingAborted the carried checkpoint is written to the ``.lastgood``
    path before the error propagates.
    """
    with CrashSafeOrchestrator(output_path, install_signals=install_signals) as orchestrator:
        try:
            return train_fn(orchestrator.record)
        except TrainingAborted as exc:
            orchestrator.save_checkpoint(exc.last_good)
            raise
