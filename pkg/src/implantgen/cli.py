"""Command-line entry point: ``implantgen <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__, nrrd, skull
from .metrics import evaluate_set
from .nn import model as nnmodel
from .nn.model import NetworkConfig, param_count
from .nn.train import TrainingDiverged
from .pipeline import (ExperimentConfig, LocalizationError, PipelineConfig, paper_n1, paper_n2,
                       run_pipeline, train_stage)

log = logging.getLogger("implantgen")

EXIT_USAGE, EXIT_DATA, EXIT_PIPELINE = 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def _manifest(path: Path, args: argparse.Namespace, inputs: dict, outputs: list,
              seed=None, config: str | None = None, extra: dict | None = None) -> None:
    """Reproduction record.  Contents depend only on the invocation and inputs,
    so reruns write identical bytes; wall-clock time goes to the log instead."""
    record = {
        "command": args.command,
        "argv": [a for a in args.argv],
        "seed": seed,
        "config": config,
        "config_hash": _sha(Path(config)) if config else None,
        "inputs": inputs,
        "outputs": sorted(str(o) for o in outputs),
        "tool_version": __version__,
    }
    record.update(extra or {})
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


# --- commands -----------------------------------------------------------------


def cmd_synth_data(args) -> int:
    cfg = skull.DatasetConfig()
    if args.config:
        cfg = skull.DatasetConfig.from_json(json.loads(Path(args.config).read_text()))
    cases = skull.make_dataset(args.n, args.distribution, cfg, args.seed, start=args.start)
    out = Path(args.out)
    run = {"command": "synth-data", "argv": args.argv, "tool_version": __version__,
           "config": args.config, "config_hash": _sha(Path(args.config)) if args.config else None}
    skull.write_dataset(out, cases, args.split, args.distribution, cfg, args.seed, run)
    print(f"wrote {len(cases)} cases to {out}")
    return 0


def cmd_extract_skull(args) -> int:
    ct = nrrd.load(args.inp)
    mask = skull.extract_skull(ct, args.hu)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    nrrd.save(out, mask)
    _manifest(out.with_name(out.name + ".manifest.json"), args,
              {"ct": {"path": args.inp, "sha256": _sha(Path(args.inp))}}, [out],
              extra={"hu": args.hu})
    print(f"skull: {mask.count()} voxels")
    return 0


def _load_experiment(path: str | None) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def cmd_train(args) -> int:
    if args.stage == "fine" and not args.coarse_model:
        raise UsageError("--stage fine requires --coarse-model")
    exp = _load_experiment(args.config)
    cases = skull.read_dataset(args.data)
    if not cases:
        raise DataError(f"no cases under {args.data}")
    tc = exp.train_fine if args.stage == "fine" else exp.train_coarse
    if args.seed is not None:
        tc = type(tc)(**dict(tc.to_json(), seed=args.seed))
    coarse = nnmodel.load(args.coarse_model) if args.coarse_model else None
    model, curve = train_stage(args.stage, cases, exp, tc, coarse_model=coarse)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    nnmodel.save(out, model)
    loss_csv = out.with_name(out.name + ".loss.csv")
    with open(loss_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for step, loss in curve:
            w.writerow([step, repr(float(loss))])
    inputs = {"data": args.data, "cases": [c.id for c in cases]}
    if args.coarse_model:
        inputs["coarse_model"] = {"path": args.coarse_model,
                                  "sha256": _sha(Path(args.coarse_model))}
    _manifest(out.with_name(out.name + ".manifest.json"), args, inputs, [out, loss_csv],
              seed=tc.seed, config=args.config, extra={"stage": args.stage})
    print(f"{args.stage}: final loss {curve[-1][1]:.4f} after {curve[-1][0]} steps")
    return 0


def _pipeline_config(args, n1) -> PipelineConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config).pipeline
    elif "pipeline" in n1.meta:
        cfg = PipelineConfig.from_json(n1.meta["pipeline"])
    else:
        cfg = PipelineConfig()
    changes = cfg.to_json()
    if args.mode:
        changes["mode"] = args.mode
    if args.fallback:
        changes["fallback_whole_volume"] = True
    return PipelineConfig.from_json(changes)


def cmd_predict(args) -> int:
    n1, n2 = nnmodel.load(args.n1), nnmodel.load(args.n2)
    cfg = _pipeline_config(args, n1)
    inp, out = Path(args.inp), Path(args.out)
    if inp.is_dir():
        jobs = [(c.id, c.defective) for c in skull.read_dataset(inp)]
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / f"{cid}_implant.nrrd" for cid, _ in jobs]
        manifest = out / "manifest.json"
    else:
        jobs = [(inp.stem, nrrd.load(inp))]
        targets = [out]
        out.parent.mkdir(parents=True, exist_ok=True)
        manifest = out.with_name(out.name + ".manifest.json")

    def one(job):
        return run_pipeline(n1, n2, job[1], cfg)

    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        results = list(pool.map(one, jobs))
    for target, implant in zip(targets, results):
        nrrd.save(target, implant)
    inputs = {"n1": {"path": args.n1, "sha256": _sha(Path(args.n1))},
              "n2": {"path": args.n2, "sha256": _sha(Path(args.n2))},
              "input": args.inp}
    _manifest(manifest, args, inputs, targets, config=args.config,
              extra={"pipeline": cfg.to_json()})
    print(f"wrote {len(targets)} implant mask(s)")
    return 0


def _collect(root: Path, gt: bool) -> dict:
    """Case id -> grid from a dataset tree or a directory of ``<case>_implant.nrrd``."""
    if gt and ((root / "manifest.json").exists() or any(root.glob("*/implant.nrrd"))):
        return {c.id: c.implant for c in skull.read_dataset(root)}
    found = {}
    for p in sorted(root.glob("*.nrrd")):
        cid = p.name[: -len("_implant.nrrd")] if p.name.endswith("_implant.nrrd") else p.stem
        found[cid] = nrrd.load(p)
    return found


def cmd_evaluate(args) -> int:
    preds = _collect(Path(args.pred), gt=False)
    gts = _collect(Path(args.gt), gt=True)
    if not gts:
        raise DataError(f"no ground-truth cases under {args.gt}")
    try:
        report = evaluate_set(preds, gts, meta={"pred": args.pred, "gt": args.gt})
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out.with_suffix(".csv"), out.with_suffix(".json")
    csv_path.write_text(report.to_csv())
    json_path.write_text(report.dumps())
    _manifest(out.with_suffix(".manifest.json"), args,
              {"pred": args.pred, "gt": args.gt, "cases": sorted(gts)}, [csv_path, json_path])
    d, h, r = report.means()
    print(f"mean DSC {d:.4f}  HD {'n/a' if h is None else f'{h:.4f} mm'}  RE {100 * r:.4f}%")
    return 0


def cmd_param_count(args) -> int:
    if args.preset:
        presets = {"paper-n1": paper_n1, "paper-n2": paper_n2}
        print(param_count(presets[args.preset]()))
        return 0
    if not args.config:
        raise UsageError("give --config or --preset")
    obj = json.loads(Path(args.config).read_text())
    if "layers" in obj:
        print(param_count(NetworkConfig.from_json(obj)))
    else:
        exp = ExperimentConfig.from_json(obj)
        print(f"n1 {param_count(exp.n1)}")
        print(f"n2 {param_count(exp.n2)}")
    return 0


def cmd_config(args) -> int:
    exp = ExperimentConfig()
    if args.preset == "paper":
        cfg = PipelineConfig.paper()
        exp = ExperimentConfig(cfg, paper_n1(cfg), paper_n2(cfg))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    exp.save(args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="implantgen", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="generate a synthetic phantom dataset")
    s.add_argument("--n", type=_positive, required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--distribution", choices=("in_distribution", "robustness"),
                   default="in_distribution")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--start", type=int, default=0, help="index of the first case")
    s.add_argument("--config", help="dataset configuration JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("extract-skull", help="threshold a CT volume and drop the table")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--hu", type=int, default=150)
    s.set_defaults(func=cmd_extract_skull)

    s = sub.add_parser("train", help="train the coarse, fine or completion network")
    s.add_argument("--stage", choices=("coarse", "fine", "completion"), required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--coarse-model")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="predict implants for a skull or a dataset")
    s.add_argument("--n1", required=True)
    s.add_argument("--n2", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("direct", "completion"))
    s.add_argument("--config")
    s.add_argument("--fallback", action="store_true",
                   help="use a centred window when the coarse prediction is empty")
    s.add_argument("--jobs", type=_positive, default=1)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="DSC / HD / RE report")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("param-count", help="count trainable parameters")
    s.add_argument("--config")
    s.add_argument("--preset", choices=("paper-n1", "paper-n2"))
    s.set_defaults(func=cmd_param_count)

    s = sub.add_parser("config", help="write a default experiment configuration")
    s.add_argument("--preset", choices=("desk", "paper"), default="desk")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_config)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    args.argv = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        code = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"implantgen: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LocalizationError, TrainingDiverged) as exc:
        print(f"implantgen: pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except (DataError, ValueError, OSError) as exc:
        print(f"implantgen: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
