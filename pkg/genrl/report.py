"""
Markdown run report rendered from the CSVs a run directory accumulates.
"""

import glob
import os
from typing import Any, Dict, List

from jinja2 import Template

from .metrics import read_table

REPORT_TEMPLATE = """# Run report: {{ run_dir }}

Config hash: `{{ config_hash }}`

## Training
{% if training %}
| stage | steps | final metrics |
|-------|-------|---------------|
{% for t in training -%}
| {{ t.stage }} | {{ t.steps }} | {{ t.final }} |
{% endfor %}
{% else %}
No training metrics found.
{% endif %}

## Evaluation
{% if evaluations %}
| task | mode | episodes | raw | normalized | stderr |
|------|------|----------|-----|------------|--------|
{% for e in evaluations -%}
| {{ e.task }} | {{ e.mode }} | {{ e.episodes }} | {{ e.raw_mean }} | {{ e.normalized_mean }} | {{ e.normalized_stderr }} |
{% endfor %}
{% else %}
No evaluations yet (`python main.py eval ...`).
{% endif %}
{% for table in tables %}
## {{ table.title }}

| {{ table.columns | join(' | ') }} |
|{% for c in table.columns %}---|{% endfor %}
{% for row in table.rows -%}
| {% for c in table.columns %}{{ row[c] }} | {% endfor %}
{% endfor %}
{% endfor %}
"""

TABLES = [
    ('gap_stats.csv', 'Modality gap'),
    ('ablate_temporal.csv', 'Temporal alignment ablation'),
    ('ablate_data.csv', 'Data distribution ablation'),
]


def _fmt(value: Any) -> str:
    text = str(value)
    if text.lstrip('-').isdigit():
        return text
    try:
        return f"{float(text):.4f}"
    except ValueError:
        return text


def _formatted(rows: List[Dict[str, str]]) -> List[Dict[str, str]]:
    return [{k: _fmt(v) for k, v in row.items()} for row in rows]


def _training_rows(run_dir: str) -> List[Dict[str, Any]]:
    rows = []
    for path in sorted(glob.glob(os.path.join(run_dir, '*_metrics.csv'))):
        _, table = read_table(path)
        if not table:
            continue
        last = table[-1]
        final = ', '.join(f"{k}={_fmt(v)}" for k, v in last.items() if k != 'step')
        rows.append({'stage': os.path.basename(path)[:-len('_metrics.csv')], 'steps': last.get('step', ''),
                     'final': final})
    return rows


def render_report(run_dir: str, config_hash: str) -> str:
    evaluations = []
    for path in sorted(glob.glob(os.path.join(run_dir, 'eval_*_summary.csv'))):
        evaluations.extend(_formatted(read_table(path)[1]))
    tables = []
    for name, title in TABLES:
        path = os.path.join(run_dir, name)
        if os.path.exists(path):
            _, rows = read_table(path)
            if rows:
                tables.append({'title': title, 'columns': list(rows[0].keys()), 'rows': _formatted(rows)})

    return Template(REPORT_TEMPLATE).render(run_dir=run_dir, config_hash=config_hash,
                                            training=_training_rows(run_dir),
                                            evaluations=evaluations, tables=tables)


def write_report(run_dir: str, config_hash: str) -> str:
    path = os.path.join(run_dir, 'report.md')
    os.makedirs(run_dir, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(render_report(run_dir, config_hash))
    return path
