"""Command-line entry point: ``s4od <command> ...``.

Every command writes its outputs plus a ``manifest.json`` (command, resolved
configuration, seed, input and output paths, timing) into an output
directory.  Failures print one line ``error: <kind>: <message>`` on stderr
and exit with status 2.

Configuration comes from an optional flat ``key = value`` file (``--config``)
and repeatable ``--set key=value`` flags, in that order of increasing
precedence over the built-in defaults.  Keys are the pipeline fields
(``gamma_l``, ``pretrain_epochs``, ...) and dotted sub-keys ``detector.*``,
``selector.*``, ``bench.*`` and ``scene.*``.  Unknown keys are errors.
"""

from __future__ import annotations

import argparse
import ast
import dataclasses
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .detector import DetectorConfig, DetectorParams, detect
from .evaluation import calibrate_gamma_h, coco_ap
from .formats import FormatError, load_annotations, load_detections, save_annotations, save_detections
from .pipelines import (
    BenchmarkConfig, Datasets, Method, PipelineConfig, PipelineError, RunRecord, iterate, make_datasets,
    results_table, summarize, train_teacher,
)
from .scenegen import CURATED, WEB, Scene, SceneConfig
from .selector import SelectorConfig

MANIFEST_FORMAT = "s4od-run-manifest/1"
SPLITS = ("curated", "web", "test")


class CLIError(Exception):
    """A usage or configuration problem; reported as a one-line error."""


# -- configuration -------------------------------------------------------------

@dataclasses.dataclass
class Settings:
    pipeline: PipelineConfig
    bench: BenchmarkConfig

    def to_dict(self) -> dict:
        return {"pipeline": self.pipeline.to_dict(), "bench": self.bench.to_dict()}


_SECTIONS = {
    "detector": DetectorConfig,
    "selector": SelectorConfig,
    "bench": BenchmarkConfig,
    "scene": SceneConfig,
}
_NOT_SETTABLE = {
    "": {"detector", "selector"},
    "bench": {"scene"},
    "scene": {"split", "id_offset"},
}


def _fields(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls)}


def known_keys() -> list[str]:
    keys = [k for k in _fields(PipelineConfig) if k not in _NOT_SETTABLE[""]]
    for prefix, cls in _SECTIONS.items():
        keys += [f"{prefix}.{k}" for k in _fields(cls) if k not in _NOT_SETTABLE.get(prefix, ())]
    return keys


def _literal(text: str) -> Any:
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, Method):
        try:
            return parse_method(str(value))
        except CLIError as e:
            raise CLIError(f"{key}: {e}") from None
    if key == "gamma_h":
        if value == "calibrate":
            return value
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise CLIError(f"{key}: expected a number or 'calibrate', got {value!r}")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("true", "false"):
            return str(value).lower() == "true"
        raise CLIError(f"{key}: expected true or false, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
            raise CLIError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise CLIError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (tuple, list)) or not all(isinstance(v, (int, float)) for v in value):
            raise CLIError(f"{key}: expected a comma-separated list of numbers, got {value!r}")
        return tuple(type(default[0])(v) if default else v for v in value)
    if isinstance(default, str):
        return str(value)
    raise CLIError(f"{key}: cannot be set from text")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """``key = value`` lines; ``#`` starts a comment.  Values are Python literals or bare words."""
    out: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise CLIError(f"{source}:{n}: empty key")
        if key in out:
            raise CLIError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = _literal(value)
    return out


def _default_for(key: str) -> Any:
    prefix, _, name = key.rpartition(".")
    if prefix:
        return _fields(_SECTIONS[prefix])[name]
    return _fields(PipelineConfig)[name]


def _field_default(f: dataclasses.Field) -> Any:
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def resolve(file_values: dict[str, Any], flag_values: dict[str, Any], seed: Optional[int] = None) -> Settings:
    """Merge defaults, file values and flag values (flags win), with type checks."""
    merged = {**file_values, **flag_values}
    if seed is not None:
        merged["seed"] = seed
    known = set(known_keys())
    unknown = sorted(k for k in merged if k not in known)
    if unknown:
        raise CLIError(f"unknown configuration key(s): {', '.join(unknown)}")
    groups: dict[str, dict[str, Any]] = {p: {} for p in ("", *_SECTIONS)}
    for key, value in merged.items():
        prefix, _, name = key.rpartition(".")
        groups[prefix][name] = _coerce(key, value, _field_default(_default_for(key)))
    try:
        scene = dataclasses.replace(BenchmarkConfig().scene, **groups["scene"])
        bench = BenchmarkConfig(**groups["bench"], scene=scene)
        pipeline = PipelineConfig(
            **groups[""],
            detector=DetectorConfig(**groups["detector"]),
            selector=SelectorConfig(**groups["selector"]),
        )
    except (TypeError, ValueError) as e:
        raise CLIError(f"invalid configuration: {e}") from None
    return Settings(pipeline, bench)


def parse_method(text: str) -> Method:
    for m in Method:
        if text.lower() in (m.value.lower(), m.name.lower()):
            return m
    raise CLIError(f"unknown method {text!r}; expected one of {', '.join(m.value for m in Method)}")


def _config_sources(args) -> tuple[dict[str, Any], dict[str, Any]]:
    """Values from ``--config`` and from the ``--set`` flags."""
    file_values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise CLIError(f"cannot read config {path}: {e.strerror}") from None
        file_values = parse_config_text(text, str(path))
    flags = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CLIError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        flags[k] = _literal(v)
    return file_values, flags


def _settings(args) -> Settings:
    return resolve(*_config_sources(args), args.seed)


# -- dataset directories -------------------------------------------------------

def save_split(out: Path, name: str, scenes: Sequence[Scene]) -> list[str]:
    """Images go to ``<name>.npz``; boxes to ``<name>.json`` (COCO-style), hidden extents to ``<name>_truth.json``."""
    images = np.stack([s.image for s in scenes]) if scenes else np.zeros((0, 1, 1, 1))
    ids = np.array([s.image_id for s in scenes], dtype=np.int64)
    with open(out / f"{name}.npz", "wb") as fh:
        np.savez(fh, images=images, ids=ids)
    save_annotations(out / f"{name}.json", scenes)
    truth = [dataclasses.replace(s, gt_boxes=s.true_boxes) for s in scenes]
    save_annotations(out / f"{name}_truth.json", truth)
    return [f"{name}.npz", f"{name}.json", f"{name}_truth.json"]


def load_split(data_dir: Path, name: str) -> list[Scene]:
    path = data_dir / f"{name}.npz"
    try:
        with np.load(path) as z:
            images, ids = z["images"], z["ids"]
    except (OSError, KeyError, ValueError) as e:
        raise CLIError(f"cannot read {path}: {e}") from None
    anns = load_annotations(data_dir / f"{name}.json")
    truth_path = data_dir / f"{name}_truth.json"
    truth = load_annotations(truth_path) if truth_path.exists() else None
    tag = WEB if name == "web" else CURATED
    scenes = []
    for img, i in zip(images, ids.tolist()):
        if i not in anns.images:
            raise CLIError(f"{data_dir / (name + '.json')}: no entry for image {i}")
        if anns.images[i] != (img.shape[1], img.shape[0]):
            raise CLIError(f"{data_dir / (name + '.json')}: image {i} size does not match the stored pixels")
        hidden = truth.boxes.get(i, []) if truth else []
        scenes.append(Scene(img, anns.boxes[i], i, tag, true_boxes=hidden))
    return scenes


def load_datasets(d_dir: Path, u_dir: Optional[Path] = None) -> Datasets:
    u_dir = d_dir if u_dir is None else u_dir
    web = [dataclasses.replace(s, gt_boxes=[]) for s in load_split(u_dir, "web")]
    return Datasets(load_split(d_dir, "curated"), web, load_split(d_dir, "test"))


# -- manifests and helpers -----------------------------------------------------

def write_manifest(out: Path, command: str, args, settings: Optional[Settings], inputs: dict,
                   outputs: Sequence[str], seconds: float, extra: Optional[dict] = None) -> None:
    doc = {
        "format": MANIFEST_FORMAT,
        "version": __version__,
        "command": command,
        "argv": list(getattr(args, "argv", [])),
        "config_path": getattr(args, "config", None),
        "resolved_config": None if settings is None else settings.to_dict(),
        "seed": getattr(args, "seed", None),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": sorted(outputs),
        "seconds": round(seconds, 3),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CLIError(f"cannot create output directory {out}: {e.strerror}") from None
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _detect_chunk(payload):
    params, images, cfg = payload
    return [detect(img, params, cfg.score_floor, cfg.nms_iou, cfg.pre_nms_top_k, cfg.max_detections)
            for img in images]


def detect_scenes(params: DetectorParams, scenes: Sequence[Scene], cfg: PipelineConfig, jobs: int = 1) -> dict:
    """Detections per image id.  With ``jobs > 1`` images are split into contiguous chunks across processes;
    each image's detections depend only on that image, so the result is the same for any ``jobs``."""
    images = [s.image for s in scenes]
    if jobs <= 1 or len(images) < 2:
        dets = _detect_chunk((params, images, cfg))
    else:
        bounds = np.linspace(0, len(images), min(jobs, len(images)) + 1).astype(int)
        chunks = [(params, images[a:b], cfg) for a, b in zip(bounds[:-1], bounds[1:])]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            dets = [d for part in pool.map(_detect_chunk, chunks) for d in part]
    return {s.image_id: d for s, d in zip(scenes, dets)}


def _record_json(rec: RunRecord) -> dict:
    # timing lives in the manifest so that record files are reproducible byte for byte
    d = rec.to_json()
    d.pop("seconds", None)
    return d


# -- commands ----------------------------------------------------------------

def cmd_gen(args) -> None:
    settings = _settings(args)
    out = _out_dir(args.out)
    t0 = time.perf_counter()
    data = make_datasets(settings.bench, settings.pipeline.seed)
    outputs = []
    for name in SPLITS:
        outputs += save_split(out, name, getattr(data, name))
    write_manifest(out, "gen", args, settings, {}, outputs, time.perf_counter() - t0,
                   {"counts": {n: len(getattr(data, n)) for n in SPLITS}})


def cmd_train_teacher(args) -> None:
    settings = _settings(args)
    out = _out_dir(args.out)
    t0 = time.perf_counter()
    curated = load_split(Path(args.data_dir), "curated")
    params = train_teacher(curated, settings.pipeline)
    params.save(out / "teacher.json")
    write_manifest(out, "train-teacher", args, settings, {"data_dir": args.data_dir}, ["teacher.json"],
                   time.perf_counter() - t0)


def cmd_pseudo_label(args) -> None:
    settings = _settings(args)
    out = _out_dir(args.out)
    t0 = time.perf_counter()
    params = DetectorParams.load(args.params)
    scenes = load_split(Path(args.data_dir), args.split)
    dets = detect_scenes(params, scenes, settings.pipeline, args.jobs)
    name = f"{args.split}_detections.json"
    save_detections(out / name, dets)
    write_manifest(out, "pseudo-label", args, settings,
                   {"params": args.params, "data_dir": args.data_dir, "split": args.split}, [name],
                   time.perf_counter() - t0)


def cmd_calibrate(args) -> None:
    settings = _settings(args)
    out = _out_dir(args.out)
    t0 = time.perf_counter()
    pseudo = load_detections(args.pseudo)
    anns = load_annotations(args.annotations)
    pseudo = {i: pseudo.get(i, []) for i in anns.images}
    cfg = settings.pipeline
    grid = [g for g in np.round(np.arange(0.5, 0.951, 0.05), 2) if g > cfg.gamma_l]
    try:
        res = calibrate_gamma_h(pseudo, anns.boxes, grid, cfg.calibration_metric)
    except ValueError as e:
        raise PipelineError(f"calibration failed: {e}") from None
    doc = {"gamma_h": res.gamma_h, "metric": cfg.calibration_metric,
           "table": [{"gamma": g, "value": v} for g, v in res.table]}
    _write(out / "calibration.json", json.dumps(doc, indent=1) + "\n")
    lines = [f"gamma_h={res.gamma_h:.2f}", f"gamma  {cfg.calibration_metric}"]
    lines += [f"{g:.2f}   {v:.6f}" for g, v in res.table]
    _write(out / "calibration.txt", "\n".join(lines) + "\n")
    write_manifest(out, "calibrate", args, settings, {"pseudo": args.pseudo, "annotations": args.annotations},
                   ["calibration.json", "calibration.txt"], time.perf_counter() - t0)


def _run_one(settings: Settings, data: Datasets, out: Path, teacher: Optional[DetectorParams] = None
             ) -> tuple[list[str], list[RunRecord], float]:
    t0 = time.perf_counter()
    cfg = settings.pipeline
    outputs, records = [], []
    for res in iterate(data, cfg, teacher=teacher):
        suffix = "" if res.record.iteration == 1 else f"_iter{res.record.iteration}"
        res.params.save(out / f"student{suffix}.json")
        outputs.append(f"student{suffix}.json")
        if res.selector is not None:
            res.selector.save(out / f"selector{suffix}.json")
            outputs.append(f"selector{suffix}.json")
        records.append(res.record)
    _write(out / "record.json", json.dumps([_record_json(r) for r in records], indent=1) + "\n")
    _write(out / "report.txt", results_table(records))
    return outputs + ["record.json", "report.txt"], records, time.perf_counter() - t0


def _teacher_arg(args) -> Optional[DetectorParams]:
    return DetectorParams.load(args.teacher) if getattr(args, "teacher", None) else None


def cmd_run(args) -> None:
    settings = _settings(args)
    settings.pipeline = dataclasses.replace(settings.pipeline, method=parse_method(args.method))
    out = _out_dir(args.out)
    data = load_datasets(Path(args.d_dir), Path(args.u_dir) if args.u_dir else None)
    outputs, records, seconds = _run_one(settings, data, out, _teacher_arg(args))
    write_manifest(out, "run", args, settings,
                   {"d_dir": args.d_dir, "u_dir": args.u_dir or args.d_dir, "teacher": args.teacher or ""},
                   outputs, seconds, {"run_seconds": [round(r.seconds, 3) for r in records]})


def _parse_values(key: str, text: str) -> list[Any]:
    vals = [_literal(v.strip()) for v in _split_top(text)]
    if not vals:
        raise CLIError(f"--values for {key} is empty")
    return vals


def _split_top(text: str) -> list[str]:
    # split on ';' when given (values that are themselves tuples), else on ','
    sep = ";" if ";" in text else ","
    return [p for p in text.split(sep) if p.strip()]


def _sweep_point(payload):
    settings, d_dir, u_dir, point_dir, teacher_path = payload
    data = load_datasets(Path(d_dir), Path(u_dir) if u_dir else None)
    teacher = DetectorParams.load(teacher_path) if teacher_path else None
    outputs, records, seconds = _run_one(settings, data, Path(point_dir), teacher)
    return outputs, records, seconds


def cmd_sweep(args) -> None:
    base = _settings(args)
    method = parse_method(args.method)
    keys = [k.strip() for k in args.param.split(",")]
    value_lists = [_parse_values(k, v) for k, v in zip(keys, args.values.split("|"))]
    if len(value_lists) != len(keys):
        raise CLIError(f"--values needs one '|'-separated list per key in --param ({len(keys)})")
    n = len(value_lists[0])
    if any(len(v) != n for v in value_lists):
        raise CLIError("every value list in --values must have the same length")
    out = _out_dir(args.out)
    file_values, flags = _config_sources(args)
    payloads, names = [], []
    for i in range(n):
        point = {k: vals[i] for k, vals in zip(keys, value_lists)}
        settings = resolve(file_values, {**flags, **point}, args.seed)
        settings.pipeline = dataclasses.replace(settings.pipeline, method=method)
        name = f"point{i:02d}"
        _out_dir(str(out / name))
        payloads.append((settings, args.d_dir, args.u_dir, str(out / name), args.teacher))
        names.append((name, point))
    if args.jobs > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_point, payloads))
    else:
        results = [_sweep_point(p) for p in payloads]
    rows, all_records = [], []
    for (name, point), payload, (outputs, records, seconds) in zip(names, payloads, results):
        write_manifest(out / name, "sweep-point", args, payload[0],
                       {"d_dir": args.d_dir, "u_dir": args.u_dir or args.d_dir}, outputs, seconds,
                       {"point": point})
        last = records[-1]
        rows.append({"point": name, "values": point, "student": last.student, "gamma_h": last.gamma_h})
        all_records += records
    _write(out / "summary.json", json.dumps(rows, indent=1) + "\n")
    header = ["point", *keys, "AP@[.5,.95]", "AP@.5", "AP@.75"]
    lines = ["\t".join(header)]
    for r in rows:
        s = r["student"]
        lines.append("\t".join([r["point"], *(str(r["values"][k]) for k in keys),
                                *(_fmt(s[c]) for c in ("ap_50_95", "ap_50", "ap_75"))]))
    _write(out / "summary.txt", "\n".join(lines) + "\n")
    write_manifest(out, "sweep", args, base, {"d_dir": args.d_dir, "u_dir": args.u_dir or args.d_dir},
                   ["summary.json", "summary.txt", *[f"{nm}/" for nm, _ in names]],
                   sum(r[2] for r in results), {"param": keys, "points": [p for _, p in names]})


def _fmt(v: Optional[float]) -> str:
    return "-" if v is None else f"{100 * v:.2f}"


def cmd_eval(args) -> None:
    out = _out_dir(args.out)
    t0 = time.perf_counter()
    dets = load_detections(args.detections)
    anns = load_annotations(args.annotations)
    stray = sorted(set(dets) - set(anns.images))
    if stray:
        raise CLIError(f"{args.detections}: detections for unknown image id(s) {stray[:5]}")
    report = coco_ap(dets, anns.boxes)
    report.save(out / "report.json")
    _write(out / "report.txt", report.to_text())
    write_manifest(out, "eval", args, None, {"detections": args.detections, "annotations": args.annotations},
                   ["report.json", "report.txt"], time.perf_counter() - t0)


def _find_records(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    found = sorted(path.rglob("record.json"))
    if not found:
        raise CLIError(f"no record.json under {path}")
    return found


def cmd_report(args) -> None:
    out = _out_dir(args.out)
    t0 = time.perf_counter()
    records, sources = [], []
    for d in args.run_dirs:
        for p in _find_records(Path(d)):
            try:
                docs = json.loads(p.read_text(encoding="utf-8"))
                records += [RunRecord.from_json(x) for x in (docs if isinstance(docs, list) else [docs])]
            except (OSError, json.JSONDecodeError, TypeError) as e:
                raise FormatError(f"{p}: not a run record: {e}") from None
            sources.append(str(p))
    _write(out / "table.txt", results_table(records))
    per_metric = {m: summarize(records, m) for m in ("ap_50_95", "ap_50", "ap_75")}
    _write(out / "table.json", json.dumps({"runs": len(records), "summary": per_metric}, indent=1) + "\n")
    write_manifest(out, "report", args, None, {f"run{i}": s for i, s in enumerate(sources)},
                   ["table.txt", "table.json"], time.perf_counter() - t0)


# -- argument parsing ----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-image stages")
    common.add_argument("--out", required=True, help="output directory")

    p = _Parser(prog="s4od", description="Selective self-supervised self-training on synthetic scenes.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen", parents=[common], help="generate curated, web and test scenes")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("train-teacher", parents=[common], help="train the baseline detector on curated scenes")
    s.add_argument("data_dir")
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("pseudo-label", parents=[common], help="run a detector over one split")
    s.add_argument("params")
    s.add_argument("data_dir")
    s.add_argument("--split", choices=SPLITS, default="web")
    s.set_defaults(func=cmd_pseudo_label)

    s = sub.add_parser("calibrate", parents=[common], help="pick gamma_h by AP of the thresholded pseudo boxes")
    s.add_argument("pseudo")
    s.add_argument("annotations")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("run", parents=[common], help="train one method and evaluate it")
    s.add_argument("method")
    s.add_argument("d_dir")
    s.add_argument("u_dir", nargs="?")
    s.add_argument("--teacher", help="teacher params (trained from D when omitted)")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", parents=[common], help="run one method over a grid of configuration values")
    s.add_argument("method")
    s.add_argument("d_dir")
    s.add_argument("u_dir", nargs="?")
    s.add_argument("--param", required=True, help="configuration key(s), comma separated")
    s.add_argument("--values", required=True,
                   help="values per key: comma (or ';') separated, one '|'-separated list per key")
    s.add_argument("--teacher")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("eval", parents=[common], help="COCO-style AP of a detection file")
    s.add_argument("detections")
    s.add_argument("annotations")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", parents=[common], help="comparison table over run directories")
    s.add_argument("run_dirs", nargs="+")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        if args.jobs < 1:
            raise CLIError("--jobs must be at least 1")
        args.func(args)
    except CLIError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    except FormatError as e:
        print(f"error: format: {e}", file=sys.stderr)
        return 2
    except PipelineError as e:
        print(f"error: pipeline: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {type(e).__name__}: {' '.join(str(e).split())}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
