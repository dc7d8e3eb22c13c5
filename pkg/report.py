"""Write evaluation reports as JSON, a plain-text table and an optional CSV."""

import csv
import json
import logging
from pathlib import Path

from jinja2 import Environment, FileSystemLoader, StrictUndefined

from analysis import EvalReport, average_reports
from models import VIEWS

logger = logging.getLogger(__name__)

TEMPLATES = Path(__file__).resolve().parent / "templates"

env = Environment(loader=FileSystemLoader(TEMPLATES), undefined=StrictUndefined,
                  keep_trailing_newline=True)


def cell(value, width):
    if value is None:
        return "-".rjust(width)
    return f"{value:.4f}".rjust(width)


def render_table(reports, title="prism-rm evaluation", at="chosen"):
    """Method x domain accuracy table, seed-averaged, plus routing and alignment."""

    rows = average_reports(reports)
    domains = sorted({d for row in rows for d in row["accuracy"]})
    seeds = sorted({r.seed for r in reports if r.seed is not None})
    seed_note = f"mean over seeds {', '.join(map(str, seeds))}" if len(seeds) > 1 else (
        f"seed {seeds[0]}" if seeds else "no seed recorded")

    routing = [{"mode": r.mode, "domain": domain, "pi": pi}
               for r in reports for domain, pi in r.routing.items()]
    alignment = [{"mode": r.mode, "domain": domain, "stage": stage, "values": values}
                 for r in reports for stage, groups in r.alignment.items()
                 for domain, values in groups.items()]
    notes = sorted({note for r in reports for note in r.notes})

    return env.get_template("report.txt").render(
        title=title, seed_note=seed_note, domains=domains, rows=rows, routing=routing,
        alignment=alignment, views=VIEWS, at=at, notes=notes, cell=cell)


def emit_report(reports, path, records=None, at="chosen"):
    """Write <path>.json and <path>.txt, and <path>.csv when records are given.

    Returns the written paths.
    """

    if isinstance(reports, EvalReport):
        reports = [reports]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    document = {"reports": [r.to_dict() for r in reports], "summary": average_reports(reports)}
    json_path = path.with_suffix(".json")
    with open(json_path, "w") as f:
        json.dump(document, f, indent=2)
        f.write("\n")

    text_path = path.with_suffix(".txt")
    text_path.write_text(render_table(reports, at=at))
    written = [json_path, text_path]

    if records is not None:
        rows = [record.to_row() for record in records]
        fields = []
        for row in rows:
            fields.extend(key for key in row if key not in fields)
        csv_path = path.with_suffix(".csv")
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
        written.append(csv_path)

    logger.info("wrote report %s", ", ".join(str(p) for p in written))
    return written


def load_report(path):
    """Read the reports back from a JSON report file."""

    with open(Path(path).with_suffix(".json")) as f:
        document = json.load(f)
    return [EvalReport.from_dict(data) for data in document["reports"]]
