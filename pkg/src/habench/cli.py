"""Command-line driver: ``habench synth | harmonize | apply | report | compare``.

Commands communicate through directories, so harmonization and reporting can
be run independently. Every failure exits with status 1 and a single line on
stderr starting with ``error:``.
"""

from __future__ import annotations

import argparse
import importlib
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from .core import HabenchError, VoxelDataset, assemble_dataset, build_design_matrix
from .harmonize import get_method, load_model
from .nifti_io import Volume, read_mask, read_volume, write_volume
from .parallel import resolve_threads
from .report import compare_summaries, format_comparison, generate_report, write_comparison, write_report
from .synth import SynthSpec, generate, write_synth_bundle
from .tabular_io import ConfigError, infer_schema, read_run_config, read_sample_table, write_sample_table

log = logging.getLogger("habench")


class CommandError(HabenchError):
    pass


def _load_json(path: Path, what: str):
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CommandError(f"cannot read {what} {path}: {exc.strerror or exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CommandError(f"{what} {path}: invalid JSON at byte {exc.pos}: {exc.msg}") from None


def _replace_dir(tmp: Path, out: Path) -> None:
    if out.exists():
        if not out.is_dir():
            raise CommandError(f"{out} exists and is not a directory")
        shutil.rmtree(out)
    tmp.rename(out)


def _staging_dir(out: Path) -> Path:
    out.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))


def _load_inputs(table_path, mask_path, categorical=()):
    mask = read_mask(mask_path)
    schema = infer_schema(table_path, categorical=categorical)
    loaded = read_sample_table(table_path, schema)
    volumes = [(image_id, read_volume(p)) for image_id, p in loaded.paths.items()]
    dataset = assemble_dataset(volumes, mask, loaded.table)
    return loaded, dict(volumes), dataset


def cmd_synth(args) -> int:
    spec = SynthSpec.from_dict(_load_json(Path(args.spec), "synth spec"))
    out = Path(args.out)
    try:
        tmp = _staging_dir(out)
    except OSError as exc:
        raise CommandError(f"cannot create output directory {out}: {exc.strerror or exc}") from None
    try:
        write_synth_bundle(generate(spec), tmp)
        _replace_dir(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    log.info("wrote synthetic bundle to %s", out)
    return 0


def _write_harmonized(loaded, volumes, dataset: VoxelDataset, values: np.ndarray, model: dict, out: Path) -> None:
    tmp = _staging_dir(out)
    try:
        for row, image_id in enumerate(dataset.table.image_ids):
            src = volumes[image_id]
            data = dataset.mask.embed(values[row], background=src.data)
            target = tmp / image_id
            target.parent.mkdir(parents=True, exist_ok=True)
            write_volume(Volume(src.geometry, data, "harmonized"), target, "float64")
        write_sample_table(dataset.table, tmp / loaded.source.name)
        (tmp / "model.json").write_text(json.dumps(model) + "\n")
        _replace_dir(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def cmd_harmonize(args) -> int:
    config = read_run_config(args.config)
    out = args.out or config.output_dir
    if not out:
        raise CommandError("no output directory: pass --out or set output_dir in the config")
    loaded, volumes, dataset = _load_inputs(args.table, args.mask, config.categorical)
    method = get_method(config.method, config)
    if hasattr(method, "threads"):
        from dataclasses import replace
        method = replace(method, threads=args.threads)
    design = build_design_matrix(dataset.table, config.covariate_names)
    fitted = method.fit(dataset, design)
    values = method.apply(fitted, dataset, design)
    model = fitted.to_dict() if hasattr(fitted, "to_dict") else dict(fitted) if isinstance(fitted, dict) else {}
    model.setdefault("method", config.method)
    model["covariates"] = list(config.covariate_names)
    model["categorical"] = list(config.categorical)
    _write_harmonized(loaded, volumes, dataset, values, model, Path(out))
    log.info("harmonized %d images with %s into %s", len(dataset.table), config.method, out)
    return 0


def cmd_apply(args) -> int:
    obj = _load_json(Path(args.model), "model")
    method, fitted = load_model(obj)
    loaded, volumes, dataset = _load_inputs(args.table, args.mask, obj.get("categorical", ()))
    design = build_design_matrix(dataset.table, obj.get("covariates", []))
    values = method.apply(fitted, dataset, design)
    _write_harmonized(loaded, volumes, dataset, values, obj, Path(args.out))
    return 0


def cmd_report(args) -> int:
    if not 0 < args.alpha < 1:
        raise ConfigError(f"alpha must be in (0, 1), got {args.alpha}")
    _, _, dataset = _load_inputs(args.table, args.mask, args.categorical or ())
    report = generate_report(dataset, args.alpha, threads=args.threads)
    out = Path(args.out)
    tmp = _staging_dir(out)
    try:
        write_report(report, dataset.mask, tmp, n_bins=args.bins)
        _replace_dir(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    s = report.summary
    print(f"V={s['V']} S={s['S']} n_F={s['n_F']} f_F={s['f_F']:.4f} "
          f"n_t={'N/A' if s['n_t'] is None else s['n_t']}")
    return 0


def cmd_compare(args) -> int:
    summaries = []
    for item in args.reports:
        label, sep, directory = item.partition("=")
        if not sep or not label or not directory:
            raise CommandError(f"expected label=dir, got {item!r}")
        summaries.append((label, _load_json(Path(directory) / "summary.json", "summary")))
    rows = compare_summaries(summaries)
    write_comparison(rows, args.out)
    print(format_comparison(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="habench", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $HABENCH_THREADS or 1); never changes outputs")
    parser.add_argument("--plugin", action="append", default=[],
                        help="import a module that registers custom harmonization methods")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-site bundle")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("harmonize", help="fit and apply a harmonization method")
    p.add_argument("--table", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_harmonize)

    p = sub.add_parser("apply", help="apply a saved model.json to images")
    p.add_argument("--table", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("report", help="voxel-wise site-effect report")
    p.add_argument("--table", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--bins", type=int, default=50, help="eta-squared histogram bins")
    p.add_argument("--categorical", action="append", help="treat this table column as categorical")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", help="tabulate summaries from several report directories")
    p.add_argument("--reports", nargs="+", required=True, metavar="LABEL=DIR")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.threads = resolve_threads(args.threads)
        for module in args.plugin:
            importlib.import_module(module)
        return args.func(args)
    except (HabenchError, ValueError, OSError, ImportError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
