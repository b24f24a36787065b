"""Experiment runner: dataset generation, training, evaluation, grad checks.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import chain as ch
from . import dataio, metrics as met, models as mdl
from .config import RunConfig, load_config, paper_scale_config, save_config, toy_config
from .errors import ConfigError, ContractViolation, DataError, MmchainError, NumericError
from .optim import AdamState, grad_check
from .tensor import Tensor
from .world import CHARS, SpeechSeq, TextSeq, gen_corpus

log = logging.getLogger("mmchain")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

CSV_HEADER = "stage,mode,component,metric,value,seed,config_hash"


def _setup_logging(out_dir: Path | None) -> None:
    handlers = [logging.StreamHandler(sys.stderr)]
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(out_dir / "run.log", mode="a"))
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        handlers=handlers,
        force=True,
    )


def _load_run_config(args) -> RunConfig:
    if getattr(args, "paper_scale", False):
        cfg = paper_scale_config(seed=args.seed if args.seed is not None else 0)
    elif args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = toy_config()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.validate()
    if getattr(args, "beam", None) is not None:
        cfg.chain.beam = args.beam
        cfg.validate()
    return cfg


def _reports_to_csv(reports) -> str:
    lines = [CSV_HEADER]
    for rep in reports:
        for stage, mode, comp, metric, val, seed, chash in rep.rows():
            lines.append(f"{stage},{mode},{comp},{metric},{val!r},{seed},{chash}")
    return "\n".join(lines) + "\n"


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out)
    _setup_logging(None)
    ds = gen_corpus(cfg.world, cfg.partitions, cfg.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.save_dataset(ds, out, config_hash=cfg.config_hash())
    manifest = _manifest_text(cfg, ds)
    manifest_path = out.with_suffix(out.suffix + ".manifest.txt")
    manifest_path.write_text(manifest, encoding="utf-8")
    log.info("wrote dataset %s and manifest %s", out, manifest_path)
    print(manifest, end="")
    return EXIT_OK


def _manifest_text(cfg: RunConfig, ds) -> str:
    lines = [
        "mmchain dataset manifest",
        f"config_hash: {cfg.config_hash()}",
        f"seed: {cfg.seed}",
        f"scene_capacity: {cfg.world.scene_capacity}",
        f"scene_demand: {cfg.partitions.total_scenes()}",
        "partition scene counts: "
        + json.dumps(
            {
                "paired": cfg.partitions.paired,
                "unpaired": cfg.partitions.unpaired,
                "speech_only": cfg.partitions.speech_only,
                "image_only": cfg.partitions.image_only,
                "dev": cfg.partitions.dev,
                "test": cfg.partitions.test,
            }
        ),
        "example counts: "
        + json.dumps({name: len(exs) for name, exs in ds.partitions().items()}),
        f"vocabulary ({len(CHARS) + 3} symbols incl pad/sos/eos): "
        + "".join(sorted(CHARS, key=CHARS.get)),
        "",
    ]
    return "\n".join(lines)


def _stage_dir(out: Path, idx: int, name: str) -> Path:
    return out / f"stage_{idx}_{name}"


def _save_stage(out: Path, idx: int, name: str, state: ch.ChainState, report, chash: str) -> None:
    sdir = _stage_dir(out, idx, name)
    sdir.mkdir(parents=True, exist_ok=True)
    for kind, params in state.params.items():
        dataio.save_checkpoint(
            sdir / f"{kind}.ckpt",
            params,
            step_count=state.optims[kind].t,
            config_hash=chash,
            adam=state.optims[kind],
        )
    extra = {"default_spk": None if state.default_spk is None else state.default_spk.tolist()}
    (sdir / "state.json").write_text(json.dumps(extra, sort_keys=True), encoding="utf-8")
    (sdir / "report.json").write_text(
        json.dumps(
            {
                "stage": report.stage,
                "mode": report.mode,
                "seed": report.seed,
                "config_hash": report.config_hash,
                "wall_seconds": report.wall_seconds,
                "values": {f"{c}.{m}": v for (c, m), v in sorted(report.values.items())},
            },
            sort_keys=True,
            indent=2,
        ),
        encoding="utf-8",
    )
    (sdir / "DONE").write_text("ok\n", encoding="utf-8")


def _load_stage_state(sdir: Path, ccfg: ch.ChainConfig) -> tuple[ch.ChainState, object]:
    params, optims = {}, {}
    for ckpt in sorted(sdir.glob("*.ckpt")):
        p, adam, header = dataio.load_checkpoint(ckpt)
        if p.kind != ckpt.stem:
            raise DataError(f"checkpoint kind mismatch in {ckpt}: header says {p.kind!r}")
        params[p.kind] = p
        optims[p.kind] = adam if adam is not None else AdamState(lr=ccfg.lr_for(p.kind))
    extra = json.loads((sdir / "state.json").read_text(encoding="utf-8"))
    spk = extra.get("default_spk")
    state = ch.ChainState(
        params=params,
        optims=optims,
        default_spk=None if spk is None else np.asarray(spk, dtype=np.float64),
    )
    report = json.loads((sdir / "report.json").read_text(encoding="utf-8"))
    return state, report


def _report_from_json(d: dict) -> ch.StageReport:
    values = {}
    for key, v in d["values"].items():
        comp, metric = key.split(".", 1)
        values[(comp, metric)] = v
    return ch.StageReport(
        stage=d["stage"],
        mode=d["mode"],
        values=values,
        seed=d["seed"],
        config_hash=d["config_hash"],
        wall_seconds=d["wall_seconds"],
    )


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out)
    mode = args.mode
    chash = cfg.config_hash()
    csv_path = out / "metrics.csv"
    if out.exists() and csv_path.exists() and not args.overwrite:
        raise DataError(
            f"output {out} already holds a completed run; pass --overwrite to replace it"
        )
    _setup_logging(out)
    ds = dataio.load_dataset(args.data)
    mcfg = cfg.model_config()
    ccfg = cfg.chain
    if mode in ("mmc1", "mmc2"):
        ccfg.mode = mode
    stage_names = [n for n, _ in ch.schedule_stages(ds, mode, mcfg, ccfg, cfg.seed)]

    start_stage = 0
    resume_state = None
    prior_reports: list[ch.StageReport] = []
    if not args.overwrite:
        for idx, name in enumerate(stage_names):
            sdir = _stage_dir(out, idx, name)
            if (sdir / "DONE").exists():
                state, report_json = _load_stage_state(sdir, ccfg)
                if report_json["config_hash"] != chash:
                    raise DataError(
                        f"existing checkpoints in {out} were produced by config "
                        f"{report_json['config_hash']}, current config is {chash}"
                    )
                resume_state = state
                prior_reports.append(_report_from_json(report_json))
                start_stage = idx + 1
            else:
                break
    if start_stage:
        log.info("resuming %s from stage %d", mode, start_stage)

    t0 = time.time()
    ectx = ch.make_eval_context(ds)

    def after_stage(idx, name, state, report):
        _save_stage(out, idx, name, state, report, chash)
        log.info("stage %s done in %.1fs", name, report.wall_seconds)

    state, reports = ch.train_schedule(
        ds,
        mode,
        mcfg,
        ccfg,
        cfg.seed,
        ectx=ectx,
        config_hash=chash,
        log=log.info,
        resume_state=resume_state,
        start_stage=start_stage,
        after_stage=after_stage,
    )
    all_reports = prior_reports + reports
    out.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(_reports_to_csv(all_reports), encoding="utf-8")
    save_config(cfg, out / "config.json")
    log.info("run complete in %.1fs; metrics at %s", time.time() - t0, csv_path)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    _setup_logging(None)
    if args.split == "test" and not args.allow_test:
        raise ConfigError("evaluating the test split requires --allow-test")
    ds = dataio.load_dataset(args.data)
    ckpt_dir = Path(args.checkpoint)
    if not ckpt_dir.is_dir():
        raise DataError(f"checkpoint path {ckpt_dir} is not a stage directory")
    ccfg = cfg.chain
    state, report_json = _load_stage_state(ckpt_dir, ccfg)
    mcfg = cfg.model_config()
    ectx = ch.make_eval_context(ds, split=args.split)
    beam = args.beam if args.beam is not None else 3
    values = ch.evaluate(state, ectx, mcfg, beam=beam)
    report = ch.StageReport(
        stage=f"eval-{args.split}",
        mode=report_json["mode"],
        values=values,
        seed=cfg.seed,
        config_hash=cfg.config_hash(),
    )
    csv = _reports_to_csv([report])
    if args.out:
        Path(args.out).write_text(csv, encoding="utf-8")
    print(csv, end="")
    return EXIT_OK


def _gradcheck_instances(mcfg: mdl.ModelConfig, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([87, seed]))
    x = SpeechSeq(
        frames=rng.uniform(-1.0, 1.0, (3, mcfg.frame_dim)),
        stop_flags=np.array([False, False, True]),
    )
    y = TextSeq(tokens=np.array([3, 4, 5, 2]))
    y2 = TextSeq(tokens=np.array([7, 9, 2]))
    z = rng.uniform(0.0, 1.0, (mcfg.image_size, mcfg.image_size, mcfg.image_channels))
    from .world import Image as Img

    z = Img(pixels=z)
    spk = rng.uniform(-1.0, 1.0, mcfg.spk_dim)
    return {
        "asr": lambda p: mdl.asr_forward(p, x, y, mcfg)[0],
        "ic": lambda p: mdl.ic_forward(p, z, y, mcfg)[0],
        "imgsp2txt": lambda p: mdl.imgsp2txt_forward(p, x, z, y, mcfg)[0],
        "tts": lambda p: mdl.tts_forward(p, y2, spk, x, mcfg),
        "ig": lambda p: mdl.ig_loss(z, mdl.ig_generate(p, y, mcfg)),
        "spkembed": lambda p: mdl.spk_classify_loss(p, [x], [min(3, 63)]),
    }


def run_gradcheck(
    components, base_seed: int, num_seeds: int, hidden: int, tol: float, step: float, emit=print
) -> bool:
    """Finite-difference audit of every requested component; True if clean."""
    mcfg = mdl.ModelConfig(hidden=hidden)
    ok = True
    for kind in components:
        for s in range(num_seeds):
            seed = base_seed + s
            fns = _gradcheck_instances(mcfg, seed)
            params = mdl.init_component(kind, mcfg, seed)
            fn = fns[kind]
            report = grad_check(lambda: fn(params), params.tensors, step=step, tol=tol)
            status = "PASS" if report.passed else "FAIL"
            ok = ok and report.passed
            emit(f"{status} {kind} seed={seed} max_rel_err={report.max_rel_err:.3e}")
            for line in report.lines():
                emit(f"    {line}")
    return ok


def cmd_gradcheck(args) -> int:
    _setup_logging(None)
    components = (
        list(mdl.COMPONENT_KINDS) if args.components == ["all"] else args.components
    )
    for c in components:
        if c not in mdl.COMPONENT_KINDS:
            raise ConfigError(f"unknown component {c!r}; choose from {mdl.COMPONENT_KINDS}")
    ok = run_gradcheck(
        components,
        base_seed=args.seed if args.seed is not None else 0,
        num_seeds=args.num_seeds,
        hidden=args.hidden,
        tol=args.tol,
        step=args.step,
    )
    if not ok:
        raise NumericError("gradient check failed for at least one tensor")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmchain", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a dataset container + manifest")
    g.add_argument("--config", type=str, default=None, help="JSON run config path")
    g.add_argument("--paper-scale", action="store_true", help="use the full-scale preset")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", type=str, required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run a training protocol end to end")
    t.add_argument("--config", type=str, default=None)
    t.add_argument("--data", type=str, required=True)
    t.add_argument(
        "--mode",
        type=str,
        required=True,
        choices=["mmc1", "mmc2", "labelprop", "supervised-topline"],
    )
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--beam", type=int, default=None)
    t.add_argument("--out", type=str, required=True)
    t.add_argument("--overwrite", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a stage checkpoint directory")
    e.add_argument("--config", type=str, default=None)
    e.add_argument("--checkpoint", type=str, required=True)
    e.add_argument("--data", type=str, required=True)
    e.add_argument("--split", type=str, default="dev", choices=["dev", "test"])
    e.add_argument("--allow-test", action="store_true")
    e.add_argument("--beam", type=int, default=None)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", type=str, default=None)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    c.add_argument("--components", nargs="+", default=["all"])
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--num-seeds", type=int, default=5)
    c.add_argument("--hidden", type=int, default=6)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--step", type=float, default=1e-5)
    c.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError,) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractViolation, MmchainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
