"""
Report generation for ScaleAgent evaluations and ablations
"""

import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
from jinja2 import Template
from rich.console import Console
from rich.table import Table

SUMMARY_COLUMNS = ['policy', 'runs', 'miou', 'miou_std', 'mf1', 'mf1_std', 'score', 'score_std',
                   'reward', 'reward_std']

HTML_TEMPLATE = """<!DOCTYPE html>
<html>
<head>
    <title>ScaleAgent Report - {{ info.name }}</title>
    <style>
        body { font-family: Arial, sans-serif; margin: 20px; }
        .header { background: #f0f0f0; padding: 20px; border-radius: 5px; }
        .summary { background: #e8f4f8; padding: 15px; margin: 20px 0; border-radius: 5px; }
        .metrics { background: #f9f9f9; padding: 15px; margin: 20px 0; border-radius: 5px; }
        .best { font-weight: bold; }
        table { width: 100%; border-collapse: collapse; }
        th, td { padding: 8px; text-align: left; border-bottom: 1px solid #ddd; }
        th { background-color: #f2f2f2; }
    </style>
</head>
<body>
    <div class="header">
        <h1>ScaleAgent {{ info.name|capitalize }} Report</h1>
        <p>Generated on: {{ info.timestamp }}</p>
        <p>Dataset: {{ info.dataset }}</p>
        <p>Scenes: {{ info.scenes }}</p>
    </div>

    <div class="summary">
        <h2>Policies</h2>
        <table>
            <tr>{% for col in columns %}<th>{{ col }}</th>{% endfor %}</tr>
            {% for row in rows %}
            <tr class="{% if row.policy == best %}best{% endif %}">
                {% for col in columns %}
                <td>{% if row[col] is number and col != 'runs' %}{{ "%.4f"|format(row[col]) }}{% else %}{{ row[col] }}{% endif %}</td>
                {% endfor %}
            </tr>
            {% endfor %}
        </table>
    </div>

    {% if metrics %}
    <div class="metrics">
        <h2>Run Metrics</h2>
        <table>
            <tr><td>Total Steps:</td><td>{{ metrics.total_steps }}</td></tr>
            <tr><td>Duration:</td><td>{{ "%.2f"|format(metrics.total_duration) }}s</td></tr>
            <tr><td>Peak RSS:</td><td>{{ "%.1f"|format(metrics.peak_rss_mb) }} MB</td></tr>
        </table>
    </div>
    {% endif %}
</body>
</html>
"""


class ReportGenerator:
    """Write policy summaries as TSV, JSON and HTML"""

    def __init__(self, output_dir: str = "reports"):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def summary_frame(summaries: List[Dict[str, Any]]) -> pd.DataFrame:
        return pd.DataFrame(summaries, columns=SUMMARY_COLUMNS)

    def generate_tsv_report(self, summaries: List[Dict[str, Any]], name: str = "ablation") -> str:
        """Deterministic tab-separated summary (no timestamps)"""
        filepath = self.output_dir / f"{name}.tsv"
        self.summary_frame(summaries).to_csv(filepath, sep='\t', index=False, float_format='%.6f',
                                             lineterminator='\n')
        return str(filepath)

    def generate_scene_report(self, scenes: pd.DataFrame, name: str = "ablation") -> str:
        filepath = self.output_dir / f"{name}_scenes.tsv"
        scenes.to_csv(filepath, sep='\t', index=False, float_format='%.6f', lineterminator='\n')
        return str(filepath)

    def generate_json_report(self, summaries: List[Dict[str, Any]], info: Dict[str, Any],
                             metrics: Optional[Dict] = None, name: str = "ablation") -> str:
        report_data = {
            'report_info': {
                'generated_at': datetime.now(timezone.utc).isoformat(),
                'version': '1.0',
                'format': 'json'
            },
            'info': info,
            'policies': summaries,
            'metrics': metrics,
        }
        filepath = self.output_dir / f"{name}.json"
        with open(filepath, 'w', encoding='utf-8') as f:
            json.dump(report_data, f, indent=2, ensure_ascii=False)
        return str(filepath)

    def generate_html_report(self, summaries: List[Dict[str, Any]], info: Dict[str, Any],
                             metrics: Optional[Dict] = None, name: str = "ablation") -> str:
        best = max(summaries, key=lambda s: s['score'])['policy'] if summaries else None
        html_content = Template(HTML_TEMPLATE).render(
            info={'name': name, 'timestamp': datetime.now(timezone.utc).isoformat(), **info},
            columns=SUMMARY_COLUMNS,
            rows=summaries,
            best=best,
            metrics=metrics,
        )
        filepath = self.output_dir / f"{name}.html"
        with open(filepath, 'w', encoding='utf-8') as f:
            f.write(html_content)
        return str(filepath)

    def generate_all_reports(self, summaries: List[Dict[str, Any]], info: Dict[str, Any],
                             scenes: Optional[pd.DataFrame] = None, metrics: Optional[Dict] = None,
                             name: str = "ablation") -> Dict[str, str]:
        reports = {
            'tsv': self.generate_tsv_report(summaries, name),
            'json': self.generate_json_report(summaries, info, metrics, name),
            'html': self.generate_html_report(summaries, info, metrics, name),
        }
        if scenes is not None:
            reports['scenes'] = self.generate_scene_report(scenes, name)
        return reports


def render_table(summaries: List[Dict[str, Any]], title: str = "Policies", console: Optional[Console] = None):
    """Print summaries as a rich table"""
    console = console or Console()
    table = Table(title=title)
    table.add_column("Policy", style="cyan")
    for col in ("mIoU", "mF1", "Score", "Reward"):
        table.add_column(col, justify="right")
    for s in summaries:
        cells = []
        for key in ('miou', 'mf1', 'score', 'reward'):
            std = s.get(f'{key}_std', 0.0)
            cells.append(f"{s[key]:.4f}" + (f" ± {std:.4f}" if s.get('runs', 1) > 1 else ""))
        table.add_row(s['policy'], *cells)
    console.print(table)
