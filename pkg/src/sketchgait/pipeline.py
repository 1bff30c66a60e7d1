"""File-mediated pipeline stages. Each stage reads and writes documented formats only."""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, metric, pngio
from .config import RunConfig, dump_config, from_dict
from .descriptor import DescriptorSet, load_descriptors, save_descriptors, sequence_parts
from .errors import DataError, ExternalToolError, ParameterError
from .evaluation import cross_domain_eval, per_condition_report
from .modality import (
    ModalityStack, build_sketch, mask_from_parsing, parsing_to_edge, parsing_to_stack, stack_channels,
)
from .prep import (
    EmptyForeground, Protocol, SequenceMeta, index_to_json, normalize_frame,
    package_sequence, read_record, scan_manifest, write_record,
)

log = logging.getLogger(__name__)


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def write_run_files(out_dir: Path, cfg: RunConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.toml").write_text(dump_config(cfg))
    (out_dir / "VERSION").write_text(f"sketchgait {__version__}\n")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def frame_stack(root: Path, meta: SequenceMeta, i: int, cfg: RunConfig, grouping, palette):
    """Build the unnormalized multi-channel stack for frame ``i`` and its foreground mask."""
    mods = meta.modalities
    rgb = pngio.read_rgb(root / meta.frames[i])
    lm = pngio.read_labels(root / mods["parsing"][i]) if "parsing" in mods else None
    if "masks" in mods:
        mask = pngio.read_mask(root / mods["masks"][i])
    elif lm is not None:
        mask = mask_from_parsing(lm)
    else:
        raise DataError(f"{meta.name} frame {i}: needs a mask or a parsing map")
    if mask.shape != rgb.shape[:2]:
        raise DataError(f"{meta.name} frame {i}: mask {mask.shape} vs frame {rgb.shape[:2]}")

    kind = cfg.detector.kind
    if kind == "parsing-edge":
        if lm is None:
            raise DataError(f"{meta.name} frame {i}: parsing-edge sketch needs a parsing map")
        sketch = parsing_to_edge(lm, cfg.detector.parsing_edge_outer) * mask
    elif kind == "precomputed":
        if "sketches" not in mods:
            raise DataError(f"{meta.name}: manifest lists no precomputed sketches")
        sketch = pngio.read_gray(root / mods["sketches"][i]) * mask
    else:
        sketch = build_sketch(rgb, mask, cfg.detector_spec())

    base = stack_channels([sketch, mask], names=["sketch", "silhouette"])
    data, channels = [base.data], list(base.channels)
    if lm is not None:
        par = parsing_to_stack(lm, grouping, palette)
        data.append(par.data)
        channels += list(par.channels)
    return ModalityStack(np.concatenate(data), tuple(channels)), mask, sketch


def _build_one(args):
    root, meta_json, cfg_dict, grouping, palette, out_dir = args
    cfg = from_dict(cfg_dict)
    meta = SequenceMeta.from_json(meta_json)
    target = (cfg.modality.height, cfg.modality.width)
    mod_dir = Path(out_dir) / "modalities" / meta.name
    stacks, skips = [], []
    for i in range(len(meta.frames)):
        try:
            stack, mask, sketch = frame_stack(Path(root), meta, i, cfg, grouping, palette)
            stacks.append(normalize_frame(stack, mask, target))
        except (EmptyForeground, DataError, ExternalToolError, ParameterError) as exc:
            reason = {"sequence": meta.name, "frame": i, "error": type(exc).__name__, "message": str(exc)}
            if isinstance(exc, ExternalToolError):
                reason["diagnostics"] = exc.diagnostics
            skips.append(reason)
            continue
        mod_dir.mkdir(parents=True, exist_ok=True)
        pngio.write_gray(mod_dir / f"sketch_{i:03d}.png", sketch)
        pngio.write_gray(mod_dir / f"silhouette_{i:03d}.png", mask.astype(np.float64))
    record_name = None
    if stacks:
        record_name = f"{meta.name}.gstk"
        write_record(Path(out_dir) / "records" / record_name, package_sequence(meta, stacks))
    return {"name": meta.name, "record": record_name, "frames": len(meta.frames),
            "ok": len(stacks), "skips": skips, "has_parsing": "parsing" in meta.modalities}


def build_modality(manifest, cfg: RunConfig, out_dir, jobs: int = 1) -> dict:
    """Manifest -> per-frame modality PNGs and one record per sequence."""
    index = scan_manifest(manifest)
    out = Path(out_dir)
    write_run_files(out, cfg)
    (out / "records").mkdir(parents=True, exist_ok=True)
    cfg_dict = cfg.to_dict()
    tasks = [(str(index.root), e.to_json(), cfg_dict, index.grouping, index.palette, str(out))
             for e in index.entries]
    results = _map(_build_one, tasks, jobs)
    ok = sum(r["ok"] for r in results)
    total = sum(r["frames"] for r in results)
    skips = [s for r in results for s in r["skips"]]
    for s in skips:
        log.warning("skipped %s frame %d: %s", s["sequence"], s["frame"], s["message"])
    records = [r["record"] for r in results if r["record"]]
    index_json = index_to_json(index)
    index_json["records"] = records
    _dump(out / "records" / "index.json", index_json)
    summary = {
        "sequences": len(index.entries),
        "records": len(records),
        "frames": {"total": total, "ok": ok, "skipped": total - ok},
        "modalities": {
            "sketch": ok,
            "silhouette": ok,
            "parsing": sum(r["ok"] for r in results if r["has_parsing"]),
        },
        "skips": skips,
    }
    _dump(out / "summary.json", summary)
    return summary


def prep(manifest, cfg: RunConfig, out_dir) -> dict:
    index = scan_manifest(manifest)
    out = Path(out_dir)
    write_run_files(out, cfg)
    obj = index_to_json(index)
    _dump(out / "index.json", obj)
    return {"sequences": len(index.entries), "subjects": len(index.subjects)}


def _extract_one(args):
    path, dcfg = args
    record = read_record(path)
    return record.meta, sequence_parts(record, dcfg)


def extract(records_dir, cfg: RunConfig, out_dir, jobs: int = 1) -> DescriptorSet:
    records_dir = Path(records_dir)
    try:
        index = json.loads((records_dir / "index.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {records_dir / 'index.json'}: {exc}") from exc
    dcfg = cfg.descriptor_config()
    results = _map(_extract_one, [(records_dir / r, dcfg) for r in index["records"]], jobs)
    metas = [m for m, _ in results]
    parts = {b: np.stack([p[b].strips for _, p in results]) if results
             else np.zeros((0, sum(dcfg.levels), 0)) for b in dcfg.active_branches}
    ds = DescriptorSet(metas, parts, dcfg)
    out = Path(out_dir)
    write_run_files(out, cfg)
    save_descriptors(out, ds)
    _dump(out / "protocol.json", index.get("protocol", {}))
    return ds


def _protocol_for(descriptors_dir: Path, manifest=None) -> Protocol:
    if manifest is not None:
        return scan_manifest(manifest, check_files=False).protocol
    path = Path(descriptors_dir) / "protocol.json"
    if not path.exists():
        raise DataError(f"no protocol: pass --manifest or provide {path}")
    return Protocol.from_json(json.loads(path.read_text()))


def training_selection(metas, protocol: Protocol):
    conds = protocol.train_conditions or protocol.gallery_conditions or None
    subjects = set(protocol.train_subjects) if protocol.train_subjects is not None else None
    return [i for i, m in enumerate(metas)
            if (conds is None or m.condition in conds) and (subjects is None or m.subject in subjects)]


def train(descriptors_dir, cfg: RunConfig, out_dir, manifest=None) -> metric.MetricHead:
    ds = load_descriptors(descriptors_dir)
    protocol = _protocol_for(descriptors_dir, manifest)
    sel = training_selection(ds.metas, protocol)
    if not sel:
        raise DataError("protocol selects no training sequences")
    parts = {b: a[sel] for b, a in ds.parts.items()}
    labels = [ds.metas[i].subject for i in sel]
    head, curve = metric.train(parts, labels, cfg.train_config(), ds.config.levels)
    head.meta = {"modality_set": ds.config.modality_set, "branches": list(ds.parts),
                 "train_sequences": len(sel)}
    out = Path(out_dir)
    write_run_files(out, cfg)
    metric.save_head(out, head)
    metric.write_curve(out / "loss_curve.csv", curve)
    return head


def evaluate(descriptors_dir, cfg: RunConfig, out_dir, manifest=None, head_dir=None) -> dict:
    ds = load_descriptors(descriptors_dir)
    protocol = _protocol_for(descriptors_dir, manifest)
    if cfg.eval.exclusion:
        protocol = Protocol(**{**protocol.__dict__, "exclusion": cfg.eval.exclusion})
    prov = {
        "tool": f"sketchgait {__version__}",
        "modality_set": ds.config.modality_set,
        "branches": list(ds.parts),
        "fusion": ds.config.fusion,
    }
    if head_dir is not None:
        head = metric.load_head(head_dir)
        prov["head"] = "trained"
        prov["head_modality_set"] = head.meta.get("modality_set", "")
        report = cross_domain_eval(head, ds, protocol, cfg.eval.metric, provenance=prov)
    else:
        prov["head"] = "identity"
        report = per_condition_report(ds.metas, ds.raw_embeddings(), protocol, cfg.eval.metric,
                                      provenance=prov, log_matches=cfg.eval.log_matches)
    out = Path(out_dir)
    write_run_files(out, cfg)
    obj = report.to_json()
    _dump(out / "eval.json", obj)
    (out / "eval.csv").write_text(report.to_csv())
    return obj
