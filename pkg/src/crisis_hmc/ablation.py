"""Component ablation: strip hierarchy, multi-task loss, adaptive MLM and entity tokens in turn."""
from __future__ import annotations

import csv
import logging
from pathlib import Path

from .checkpoint import Checkpoint
from .evaluation import write_json
from .ontology import LabelOntology
from .pipeline import PipelineConfig, run_pipeline, sha256_file, versions

logger = logging.getLogger(__name__)

# Each row is the previous one with one more component removed, plus the
# standalone plain-text MLM row.
ABLATION_ROWS: list[tuple[str, dict]] = [
    ("HMCN_local", {"finetune.head_kind": "hmcn_local"}),
    ("-Hierarchy", {"finetune.head_kind": "lcl"}),
    ("-Multi-Task", {"finetune.head_kind": "single_task"}),
    ("-MLM", {"finetune.head_kind": "single_task", "pretrain.enabled": False}),
    ("-Entities", {"finetune.head_kind": "single_task", "pretrain.enabled": False,
                   "tokenizer.use_entities": False}),
    ("BERT_MLM", {"finetune.head_kind": "single_task", "tokenizer.use_entities": False,
                  "pretrain.alpha": 0.15, "pretrain.beta": 0.15}),
]

PLAIN_BASELINE = {"finetune.head_kind": "single_task", "pretrain.enabled": False, "tokenizer.use_entities": False}
CSV_COLUMNS = ["row", "configuration", "head_kind", "use_entities", "pretrain", "L_T", "L_B", "AIT", "config_hash"]


def row_configs(base: PipelineConfig) -> list[tuple[str, PipelineConfig]]:
    return [(name, base.with_overrides(over)) for name, over in ABLATION_ROWS]


def plain_baseline_config(base: PipelineConfig) -> PipelineConfig:
    """Plain-text single-task model without adaptive pre-training."""
    return base.with_overrides(PLAIN_BASELINE)


def _pretrain_key(cfg: PipelineConfig) -> tuple:
    d = cfg.to_dict()
    if not d["pretrain"]["enabled"]:
        return ()
    return tuple(repr(sorted(d[s].items())) for s in ("data", "ner", "tokenizer", "encoder", "pretrain"))


def _slug(i: int, name: str) -> str:
    return f"{i}_" + name.strip("-").lower().replace("-", "_")


def ablation_suite(base: PipelineConfig, out_dir, seed: int = 13, ontology: LabelOntology | None = None) -> list[dict]:
    """Run all six rows under ``out_dir/rows`` and write the summary table.

    Rows that share every pre-training setting reuse one pre-trained encoder;
    training is deterministic, so this only saves time.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache: dict[tuple, Checkpoint] = {}
    rows = []
    for i, (name, cfg) in enumerate(row_configs(base), start=1):
        row_dir = out / "rows" / _slug(i, name)
        key = _pretrain_key(cfg)
        logger.info("ablation row %d (%s)", i, name)
        manifest = run_pipeline(cfg, row_dir, seed, ontology, pretrained=cache.get(key) if key else None)
        if key and key not in cache:
            cache[key] = Checkpoint.load(row_dir / "pretrain.ckpt")
        test = manifest["results"]["test"]
        c = cfg.to_dict()
        rows.append({
            "row": i,
            "configuration": name,
            "head_kind": c["finetune"]["head_kind"],
            "use_entities": c["tokenizer"]["use_entities"],
            "pretrain": (f"mlm(alpha={c['pretrain']['alpha']},beta={c['pretrain']['beta']})"
                         if c["pretrain"]["enabled"] else "none"),
            "L_T": test["L_T"],
            "L_B": test["L_B"],
            "AIT": test["AIT"],
            "config_hash": manifest["config_hash"],
        })
    csv_path = write_ablation_csv(rows, out / "ablation.csv")
    svg_path = ablation_figure(rows, out / "ablation.svg")
    json_path = write_json({"schema": "ablation-v1", "rows": rows}, out / "ablation.json")
    write_json({
        "schema": "manifest-v1",
        "config": base.to_dict(),
        "config_hash": base.digest(),
        "seeds": {"global": seed},
        "versions": versions(),
        "rows": {_slug(r["row"], r["configuration"]): r["config_hash"] for r in rows},
        "outputs": {p.name: sha256_file(p) for p in (csv_path, svg_path, json_path)},
    }, out / "manifest.json")
    return rows


def write_ablation_csv(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([
                r["row"], r["configuration"], r["head_kind"], str(r["use_entities"]).lower(), r["pretrain"],
                f"{r['L_T']:.6f}", f"{r['L_B']:.6f}", f"{r['AIT']:.6f}", r["config_hash"],
            ])
    return path


def ablation_figure(rows, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    matplotlib.rcParams["svg.hashsalt"] = "crisis-hmc"
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(8, 4))
    for k, (metric, color) in enumerate((("L_T", "#4477aa"), ("L_B", "#ee6677"), ("AIT", "#228833"))):
        ax.bar(x + (k - 1) * 0.27, [r[metric] for r in rows], 0.27, label=metric, color=color)
    ax.set_xticks(x)
    ax.set_xticklabels([r["configuration"] for r in rows], rotation=20, fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("macro F1 (test events)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)
