"""
Performance metrics collection for ScaleAgent runs
"""

import json
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

import psutil


@dataclass
class PhaseMetrics:
    """Metrics for a single phase (pretrain, agent, joint, eval...)"""
    phase: str
    start_time: datetime
    end_time: Optional[datetime] = None
    duration: Optional[float] = None
    steps: int = 0
    final_value: Optional[float] = None
    peak_rss_mb: Optional[float] = None
    error: Optional[str] = None


@dataclass
class RunMetrics:
    """Run-wide totals"""
    total_phases: int = 0
    failed_phases: int = 0
    total_steps: int = 0
    total_duration: float = 0.0
    steps_per_second: float = 0.0
    peak_rss_mb: float = 0.0
    steps_by_phase: Dict[str, int] = field(default_factory=dict)


class MetricsCollector:
    """Collect and manage run performance metrics"""

    def __init__(self, metrics_file: Optional[str] = None):
        self.metrics_file = metrics_file
        self.phase_metrics: List[PhaseMetrics] = []
        self.run_metrics = RunMetrics()
        self.current: Dict[str, PhaseMetrics] = {}
        self._started: Dict[str, float] = {}
        self._process = psutil.Process()

    def _rss_mb(self) -> float:
        return self._process.memory_info().rss / (1024 * 1024)

    def start_phase(self, phase: str) -> str:
        self.current[phase] = PhaseMetrics(phase=phase, start_time=datetime.now(timezone.utc),
                                           peak_rss_mb=self._rss_mb())
        self._started[phase] = time.perf_counter()
        return phase

    def sample(self, phase: str):
        """Refresh the phase's peak resident memory."""
        metric = self.current.get(phase)
        if metric is not None:
            self.sample_metric(metric)

    def complete_phase(self, phase: str, steps: int = 0, final_value: Optional[float] = None,
                       error: Optional[str] = None):
        if phase not in self.current:
            return

        metric = self.current.pop(phase)
        self.sample_metric(metric)
        metric.end_time = datetime.now(timezone.utc)
        metric.duration = time.perf_counter() - self._started.pop(phase)
        metric.steps = steps
        metric.final_value = final_value
        metric.error = error
        self.phase_metrics.append(metric)
        self._update_run_metrics(metric)

        if self.metrics_file:
            self._save_metrics()

    def sample_metric(self, metric: PhaseMetrics):
        metric.peak_rss_mb = max(metric.peak_rss_mb or 0.0, self._rss_mb())

    def _update_run_metrics(self, metric: PhaseMetrics):
        run = self.run_metrics
        run.total_phases += 1
        if metric.error:
            run.failed_phases += 1
        run.total_steps += metric.steps
        run.total_duration += metric.duration or 0.0
        if run.total_duration > 0:
            run.steps_per_second = run.total_steps / run.total_duration
        run.peak_rss_mb = max(run.peak_rss_mb, metric.peak_rss_mb or 0.0)
        run.steps_by_phase[metric.phase] = run.steps_by_phase.get(metric.phase, 0) + metric.steps

    def get_run_metrics(self) -> RunMetrics:
        return self.run_metrics

    def _serialise(self) -> Dict[str, Any]:
        phases = []
        for metric in self.phase_metrics:
            entry = asdict(metric)
            entry['start_time'] = metric.start_time.isoformat()
            entry['end_time'] = metric.end_time.isoformat() if metric.end_time else None
            phases.append(entry)
        return {
            'timestamp': datetime.now(timezone.utc).isoformat(),
            'run_metrics': asdict(self.run_metrics),
            'phases': phases,
        }

    def export_json(self) -> str:
        return json.dumps(self._serialise(), indent=2)

    def _save_metrics(self):
        if not self.metrics_file:
            return
        with open(self.metrics_file, 'w', encoding='utf-8') as f:
            f.write(self.export_json())
