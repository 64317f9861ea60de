# View and display functionality for the inspection CLI
import json
import math
from typing import TYPE_CHECKING, Sequence

if TYPE_CHECKING:
    from .evaluation import EvalReport
    from .gradcheck import GradCheckResult
    from .pipeline import InspectionReport
    from .trainer import NonFiniteBatchError, TrainedInstance


def _fmt(value, digits: int = 4) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return f"{value:.{digits}f}"


def show_split_summary(summary: dict):
    print(f"\n--- Dataset {summary['name']} ---")
    for split, counts in summary["counts"].items():
        print(f" {split}: {counts['normal']} normal, {counts['anomalous']} anomalous")
    if summary.get("manifest_counts"):
        print(" Manifest counts:", json.dumps(summary["manifest_counts"]))
    print(" Channel mean:", summary["channel_mean"])
    print(" Channel std:", summary["channel_std"])

    missing = summary.get("missing_ground_truth") or []
    if missing:
        print(f" Missing ground truth ({len(missing)}):")
        for sid in missing:
            print("  -", sid)


def show_train_log(instances: Sequence['TrainedInstance']):
    if not instances:
        print("No instances trained.")
        return

    for inst in instances:
        log = inst.log
        print(f"\n--- Instance {log.instance} (seed {log.seed}) ---")
        print("Epochs:", len(log.epoch_losses))
        print("First loss:", _fmt(log.epoch_losses[0], 6))
        print("Final loss:", _fmt(log.epoch_losses[-1], 6))
        skipped = sum(log.nonfinite_batches)
        if skipped:
            print("Skipped non-finite batches:", skipped)
        print(f"Wall time: {log.seconds:.1f}s")
        print("Checkpoint:", log.checkpoint_path or "not saved")


def show_nonfinite_report(error: 'NonFiniteBatchError'):
    print("\nTraining stopped: the loss is not finite on this batch.")
    print("The original semi-supervised loss needs anomalous pixels in every sample;")
    print("use ss_modified / ss_focal or skip_policy=skip_batch.")
    print(json.dumps(error.report, indent=2))


def show_eval_report(report: 'EvalReport'):
    meta = report.metadata
    print(f"\n--- Evaluation {meta.get('mode', '?')} on {meta.get('dataset', '?')} ---")
    if meta.get("gamma"):
        print("Gamma:", meta["gamma"])
    for r in report.instances:
        line = f" Instance {r.instance}: AUC {_fmt(r.auc)} | accuracy {_fmt(r.accuracy)} | threshold {r.threshold:.6g}"
        if r.gtmap_auc is not None:
            line += f" | GTMAP AUC {_fmt(r.gtmap_auc)}"
        print(line)

    agg = report.aggregate
    print(f"Mean AUC: {_fmt(agg['auc_mean'])} +/- {_fmt(agg['auc_std'])}")
    print(f"Mean accuracy: {_fmt(agg['accuracy_mean'])} +/- {_fmt(agg['accuracy_std'])}")
    if "gtmap_auc_mean" in agg:
        print(f"Mean GTMAP AUC: {_fmt(agg['gtmap_auc_mean'])} +/- {_fmt(agg['gtmap_auc_std'])}")


def show_sweep(rows: Sequence[dict]):
    if not rows:
        print("Sweep produced no reports.")
        return

    print("\n--- Sweep ---")
    for row in rows:
        print(f" {row['mode']:<16} {row['label']:<14} AUC {_fmt(row['auc_mean'])} +/- {_fmt(row['auc_std'])}"
              f"  -> {row['path']}")


def show_inspection_report(report: 'InspectionReport'):
    print(f"\n--- Inspection {report.image_id} ---")
    print(f"Threshold: {report.threshold:.6g} ({report.threshold_source})")
    if not report.disks:
        print("No disks scored.")
    for d in report.disks:
        verdict = "ANOMALOUS" if d.anomalous else "normal"
        print(f" Disk {d.index}: score {d.score:.6g} -> {verdict} | rect {d.rect} | heatmap {d.heatmap}")
    for s in report.skipped:
        print(f" Skipped box on line {s['line']}: {s['reason']}")

    summary = report.summary
    print(f"Summary: {summary['anomalous']} anomalous, {summary['normal']} normal, {summary['skipped']} skipped")


def show_gradcheck(results: Sequence['GradCheckResult'], tol: float):
    print(f"\n--- Gradient check (tolerance {tol:g}) ---")
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f" {r.name:<26} max rel err {r.max_rel_err:.2e} over {r.instances} instances  {status}")
    failed = sum(1 for r in results if not r.passed)
    print("All checks passed." if not failed else f"{failed} checks failed.")
