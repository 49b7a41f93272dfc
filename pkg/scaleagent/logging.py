"""
Run logging for ScaleAgent
"""

import csv
import json
import logging
import math
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

PRETRAIN_COLUMNS = ["step", "loss", "lr"]
AGENT_COLUMNS = ["step", "mean_episode_reward", "L_policy", "L_value", "entropy"]


class RunLogger:
    """Human-readable run logger (console + optional file)"""

    def __init__(self, log_file: Optional[str] = None, level: str = 'INFO', quiet: bool = False):
        self.logger = logging.getLogger('scaleagent')
        self.logger.setLevel(logging.DEBUG)
        self.logger.propagate = False

        for handler in list(self.logger.handlers):
            handler.close()
        self.logger.handlers.clear()

        formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')

        if not quiet:
            console_handler = logging.StreamHandler(sys.stderr)
            console_handler.setLevel(getattr(logging, level.upper()))
            console_handler.setFormatter(formatter)
            self.logger.addHandler(console_handler)

        if log_file:
            file_handler = logging.FileHandler(log_file, encoding='utf-8')
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(formatter)
            self.logger.addHandler(file_handler)

    def log_phase_start(self, phase: str, steps: int, options: Dict[str, Any]):
        self.logger.info(f"PHASE_START - Phase: {phase}, Steps: {steps}, Options: {json.dumps(options, sort_keys=True)}")

    def log_phase_complete(self, phase: str, steps: int, duration: float, final: Optional[float] = None):
        final_info = f", Final: {final:.6f}" if final is not None and math.isfinite(final) else ""
        self.logger.info(f"PHASE_COMPLETE - Phase: {phase}, Steps: {steps}, Duration: {duration:.2f}s{final_info}")

    def log_progress(self, phase: str, step: int, values: Dict[str, float]):
        details = ", ".join(f"{k}: {v:.4f}" for k, v in values.items())
        self.logger.info(f"PROGRESS - Phase: {phase}, Step: {step}, {details}")

    def log_checkpoint(self, path: str, step: int):
        self.logger.info(f"CHECKPOINT - Path: {path}, Step: {step}")

    def log_resume(self, phase: str, step: int):
        self.logger.warning(f"RESUME - Phase: {phase}, Step: {step}")

    def log_artifact(self, kind: str, path: str):
        self.logger.info(f"ARTIFACT - Kind: {kind}, Path: {path}")

    def log_error(self, error_type: str, error_message: str):
        self.logger.error(f"ERROR - Type: {error_type}, Message: {error_message}")


class JSONRunLogger:
    """One JSON object per event"""

    def __init__(self, log_file: Optional[str] = None):
        self.log_file = log_file
        self.logger = logging.getLogger('scaleagent_json')
        self.logger.setLevel(logging.INFO)
        self.logger.propagate = False
        for handler in list(self.logger.handlers):
            handler.close()
        self.logger.handlers.clear()

        if log_file:
            handler = logging.FileHandler(log_file, encoding='utf-8')
            handler.setFormatter(logging.Formatter('%(message)s'))
            self.logger.addHandler(handler)

    def _log_event(self, event_type: str, data: Dict[str, Any]):
        log_entry = {
            'timestamp': datetime.now(timezone.utc).isoformat(),
            'event_type': event_type,
            **data
        }
        self.logger.info(json.dumps(log_entry, default=str))

    def log_phase_start(self, phase: str, steps: int, options: Dict[str, Any]):
        self._log_event('phase_start', {'phase': phase, 'steps': steps, 'options': options})

    def log_phase_complete(self, phase: str, steps: int, duration: float, final: Optional[float] = None):
        self._log_event('phase_complete', {'phase': phase, 'steps': steps, 'duration': duration, 'final': final})

    def log_progress(self, phase: str, step: int, values: Dict[str, float]):
        self._log_event('progress', {'phase': phase, 'step': step, **values})

    def log_checkpoint(self, path: str, step: int):
        self._log_event('checkpoint', {'path': path, 'step': step})

    def log_resume(self, phase: str, step: int):
        self._log_event('resume', {'phase': phase, 'step': step})

    def log_artifact(self, kind: str, path: str):
        self._log_event('artifact', {'kind': kind, 'path': path})

    def log_error(self, error_type: str, error_message: str):
        self._log_event('error', {'error_type': error_type, 'error_message': error_message})


class RunLogManager:
    """Fans run events out to the text and JSON loggers"""

    def __init__(self, log_dir: Optional[str] = None, enable_json: bool = True, level: str = 'INFO',
                 quiet: bool = False):
        self.log_dir = Path(log_dir) if log_dir else None
        if self.log_dir:
            self.log_dir.mkdir(parents=True, exist_ok=True)

        self.text_logger = RunLogger(
            log_file=str(self.log_dir / "run.log") if self.log_dir else None,
            level=level,
            quiet=quiet,
        )

        self.json_logger = None
        if enable_json and self.log_dir:
            self.json_logger = JSONRunLogger(log_file=str(self.log_dir / "events.json"))

    def _fan_out(self, method: str, *args):
        getattr(self.text_logger, method)(*args)
        if self.json_logger:
            getattr(self.json_logger, method)(*args)

    def log_phase_start(self, phase: str, steps: int, options: Dict[str, Any]):
        self._fan_out('log_phase_start', phase, steps, options)

    def log_phase_complete(self, phase: str, steps: int, duration: float, final: Optional[float] = None):
        self._fan_out('log_phase_complete', phase, steps, duration, final)

    def log_progress(self, phase: str, step: int, values: Dict[str, float]):
        self._fan_out('log_progress', phase, step, values)

    def log_checkpoint(self, path: str, step: int):
        self._fan_out('log_checkpoint', path, step)

    def log_resume(self, phase: str, step: int):
        self._fan_out('log_resume', phase, step)

    def log_artifact(self, kind: str, path: str):
        self._fan_out('log_artifact', kind, path)

    def log_error(self, error_type: str, error_message: str):
        self._fan_out('log_error', error_type, error_message)

    def close(self):
        for logger in (self.text_logger.logger, self.json_logger.logger if self.json_logger else None):
            if logger is None:
                continue
            for handler in list(logger.handlers):
                handler.close()
            logger.handlers.clear()


class CSVLog:
    """Deterministic training curve (no timestamps) written row by row"""

    def __init__(self, path, columns: Sequence[str], append: bool = False):
        self.path = Path(path)
        self.columns = list(columns)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        resume = append and self.path.exists()
        self._file = open(self.path, 'a' if resume else 'w', encoding='utf-8', newline='')
        self._writer = csv.writer(self._file, lineterminator='\n')
        if not resume:
            self._writer.writerow(self.columns)
            self._file.flush()

    def write(self, *values):
        if len(values) != len(self.columns):
            raise ValueError(f"{self.path.name}: expected {len(self.columns)} values, got {len(values)}")
        self._writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in values])
        self._file.flush()

    def truncate_after(self, step: int):
        """Drop rows past ``step`` so a resumed run rewrites them."""
        self._file.close()
        with open(self.path, 'r', encoding='utf-8', newline='') as f:
            rows: List[List[str]] = list(csv.reader(f))
        kept = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= step]
        with open(self.path, 'w', encoding='utf-8', newline='') as f:
            csv.writer(f, lineterminator='\n').writerows(kept)
        self._file = open(self.path, 'a', encoding='utf-8', newline='')
        self._writer = csv.writer(self._file, lineterminator='\n')

    def close(self):
        if not self._file.closed:
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
