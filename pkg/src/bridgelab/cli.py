"""Command-line interface.

Subcommands: gen-data, train, sample, candidates, tournament, serve, eval.
Every run writes a manifest (config snapshot, seed, content hashes of the
inputs it read) under <data_root>/runs/. Exit codes: 0 success, 2 unknown
subcommand / bad usage, 3 config parse failure, 1 anything else with a
one-line diagnostic.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ProjectConfig, load_config, write_default_config
from .manifest import new_run_dir, write_manifest
from .schedule import make_schedule
from . import imgio
from .scorenet import init_params, load_params, save_params
from .training import train, finetune_incremental, write_history
from .sampler import (
    Candidate,
    EvalCounter,
    SampleRequest,
    generate_candidates,
    sample,
)
from .feedback import Rater, group_candidates, run_tournament
from .phantom import make_dataset, load_dataset, export_dataset, oracle_artifact_score
from .metrics import CaseMetrics, MetricsReport, rmse, ssim, dice
from .server import (
    ServedCandidate,
    TournamentCoordinator,
    export_prefs,
    load_candidate_index,
    make_server,
    matchup_record,
    write_candidate_index,
)


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bridgelab")
    ap.add_argument("--config", default="bridgelab.cfg", help="project config file")
    sub = ap.add_subparsers(dest="cmd", required=True)

    sub.add_parser("gen-data", help="generate and export the phantom dataset")

    p = sub.add_parser("train", help="train the score network")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--drop-z0", action="store_true", help="ablate the source-image channel")
    p.add_argument("--init-from", help="checkpoint to continue from")
    p.add_argument("--prefs-log", help="matchup log; fine-tune on its winners")
    p.add_argument("--out", help="output directory (default <data_root>/checkpoints)")
    p.add_argument("--dtype", default="float32", choices=["float32", "float64"])

    p = sub.add_parser("sample", help="reconstruct one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--w", type=float, default=0.0)
    p.add_argument("--r", choices=["good", "bad"], default="good")
    p.add_argument("--nfe", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--det", action="store_true", default=True)
    p.add_argument("--stochastic", dest="det", action="store_false")

    p = sub.add_parser("candidates", help="grid of reconstructions per bad input")
    p.add_argument("--ckpt-dir", help="directory of ckpt_*.sbsn (default <data_root>/checkpoints)")
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--max-groups", type=int, default=0, help="cap the number of (subject,slice) groups")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory (default <data_root>/candidates)")

    p = sub.add_parser("tournament", help="run preference tournaments over candidates")
    p.add_argument("--candidates", help="candidates directory (default <data_root>/candidates)")
    p.add_argument("--rater", default="oracle", choices=["oracle"])
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("serve", help="serve matchups to the rating web UI")
    p.add_argument("--candidates", help="candidates directory (default <data_root>/candidates)")
    p.add_argument("--host")
    p.add_argument("--port", type=int)

    p = sub.add_parser("eval", help="metrics report: predictions vs references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--dataset", help="dataset dir for artifact scores (optional)")
    p.add_argument("--out", help="report directory (default <data_root>/reports/latest)")
    p.add_argument("--max-maps", type=int, default=8, help="subtraction maps to render")

    p = sub.add_parser("init-config", help="write a default config file")
    p.add_argument("--force", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    return cli(sys.argv[1:] if argv is None else argv)


def cli(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        if args.cmd == "init-config":
            path = Path(args.config)
            if path.exists() and not args.force:
                print(f"refusing to overwrite {path} (use --force)", file=sys.stderr)
                return 1
            write_default_config(path)
            print(f"wrote {path}")
            return 0
        cfg = load_config(args.config, create_data_root=(args.cmd == "gen-data"))
        handler = {
            "gen-data": _cmd_gen_data,
            "train": _cmd_train,
            "sample": _cmd_sample,
            "candidates": _cmd_candidates,
            "tournament": _cmd_tournament,
            "serve": _cmd_serve,
            "eval": _cmd_eval,
        }[args.cmd]
        return handler(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _cmd_gen_data(cfg: ProjectConfig, args) -> int:
    d = cfg.dataset
    ds = make_dataset(d.n_subjects, d.slices_per_subject, d.size, d.seed, d.train_fraction)
    out = cfg.data_root / "dataset"
    export_dataset(ds, out)
    n_bad = sum(p.r for p in ds.train)
    run = new_run_dir(cfg.data_root, "gen-data")
    write_manifest(
        run, "gen-data", cfg.snapshot(), d.seed,
        extra={"train_pairs": len(ds.train), "test_pairs": len(ds.test), "train_bad": n_bad},
    )
    print(f"dataset: {len(ds.train)} train / {len(ds.test)} test pairs -> {out}")
    return 0


def _sched(cfg: ProjectConfig):
    s = cfg.schedule
    return make_schedule(s.n_steps, s.beta_min, s.beta_max)


def _cmd_train(cfg: ProjectConfig, args) -> int:
    ds = load_dataset(cfg.data_root / "dataset")
    sched = _sched(cfg)
    from dataclasses import replace as _rep

    tcfg = cfg.train
    if args.epochs is not None:
        tcfg = _rep(tcfg, epochs=args.epochs)
    if args.seed is not None:
        tcfg = _rep(tcfg, seed=args.seed)
    net_cfg = cfg.network
    if args.drop_z0:
        net_cfg = _rep(net_cfg, drop_z0=True)

    if args.init_from:
        params = load_params(args.init_from).astype(args.dtype)
    else:
        params = init_params(net_cfg, np.random.default_rng(tcfg.seed)).astype(args.dtype)

    out = Path(args.out) if args.out else cfg.data_root / "checkpoints"
    out.mkdir(parents=True, exist_ok=True)

    if args.prefs_log:
        prefs = export_prefs(args.prefs_log, cfg.data_root)
        if not prefs:
            raise RuntimeError(f"no completed tournament winners in {args.prefs_log}")
        res = finetune_incremental(params, ds.train, prefs, tcfg, sched)
        tag = "finetuned"
    else:
        res = train(params, ds.train, tcfg, sched, checkpoint_dir=out, log_every=10)
        tag = "model"

    save_params(out / f"{tag}.sbsn", res.params)
    write_history(out / f"history_{tag}.csv", res.history)
    from .figures import save_history_curve

    save_history_curve(out / f"loss_{tag}.png", res.history)
    run = new_run_dir(cfg.data_root, "train")
    write_manifest(
        run, "train", cfg.snapshot(), tcfg.seed,
        inputs=[args.init_from] if args.init_from else [],
        extra={
            "final_loss": res.history[-1][1],
            "epochs": len(res.history),
            "checkpoints": [e for e, _ in res.checkpoints],
            "output": str(out / f"{tag}.sbsn"),
        },
    )
    print(f"trained {len(res.history)} epochs, final loss {res.history[-1][1]:.6f} -> {out / (tag + '.sbsn')}")
    return 0


def _cmd_sample(cfg: ProjectConfig, args) -> int:
    params = load_params(args.ckpt)
    sched = _sched(cfg)
    z0 = imgio.read_image(args.inp)
    counter = EvalCounter()
    req = SampleRequest(
        z0=z0,
        r_request=0 if args.r == "good" else 1,
        w=args.w,
        nfe=args.nfe,
        deterministic=args.det,
        seed=args.seed,
    )
    out_img, _ = sample(params, req, sched, counter=counter)
    imgio.write_image(args.out, out_img)
    run = new_run_dir(cfg.data_root, "sample")
    write_manifest(
        run, "sample", cfg.snapshot(), args.seed,
        inputs=[args.ckpt, args.inp],
        extra={"guided_evals": counter.n, "w": args.w, "r": args.r, "nfe": args.nfe,
               "output": str(args.out)},
    )
    print(f"sampled {args.out} (nfe={args.nfe}, w={args.w}, guided evals={counter.n})")
    return 0


def _load_checkpoints(ckpt_dir: Path) -> list[tuple[str, object]]:
    paths = sorted(
        ckpt_dir.glob("ckpt_*.sbsn"),
        key=lambda p: int(re.search(r"ckpt_(\d+)", p.name).group(1)),
    )
    if not paths:
        raise RuntimeError(f"no ckpt_*.sbsn checkpoints in {ckpt_dir}")
    return [(p.stem, load_params(p).astype("float32")) for p in paths]


def _cmd_candidates(cfg: ProjectConfig, args) -> int:
    ds = load_dataset(cfg.data_root / "dataset")
    sched = _sched(cfg)
    ckpt_dir = Path(args.ckpt_dir) if args.ckpt_dir else cfg.data_root / "checkpoints"
    checkpoints = _load_checkpoints(ckpt_dir)

    pairs = ds.train if args.split == "train" else ds.test
    bad = [p for p in pairs if p.r == 1]
    if args.max_groups:
        bad = bad[: args.max_groups]
    if not bad:
        raise RuntimeError("no bad-labeled pairs to improve")

    inputs = [(p.z0, p.subject, p.slice_id) for p in bad]
    cands = generate_candidates(
        checkpoints, list(cfg.sampler.scales), inputs, sched,
        seed=args.seed, nfe=cfg.sampler.nfe, deterministic=cfg.sampler.deterministic,
    )

    out = Path(args.out) if args.out else cfg.data_root / "candidates"
    out.mkdir(parents=True, exist_ok=True)
    served = []
    for c in cands:
        img_rel = f"candidates/{c.candidate_id}.img"
        imgio.write_image(cfg.data_root / img_rel, c.image)
        served.append(
            ServedCandidate(
                candidate_id=c.candidate_id,
                subject=c.subject,
                slice_id=c.slice_id,
                img=img_rel,
                z0=f"dataset/{c.subject}/z0_{c.slice_id:03d}.img",
                checkpoint_id=c.checkpoint_id,
                scale=c.scale,
            )
        )
    write_candidate_index(out / "index.jsonl", served)
    run = new_run_dir(cfg.data_root, "candidates")
    write_manifest(
        run, "candidates", cfg.snapshot(), args.seed,
        extra={
            "groups": len(inputs),
            "checkpoints": [cid for cid, _ in checkpoints],
            "scales": list(cfg.sampler.scales),
            "candidates": len(served),
        },
    )
    print(f"{len(served)} candidates over {len(inputs)} groups -> {out}")
    return 0


def _cmd_tournament(cfg: ProjectConfig, args) -> int:
    cand_dir = Path(args.candidates) if args.candidates else cfg.data_root / "candidates"
    served = load_candidate_index(cand_dir / "index.jsonl")
    ds = load_dataset(cfg.data_root / "dataset")

    cands = []
    for sc in served:
        cands.append(
            Candidate(
                image=imgio.read_image(cfg.data_root / sc.img),
                z0=imgio.read_image(cfg.data_root / sc.z0),
                subject=sc.subject,
                slice_id=sc.slice_id,
                checkpoint_id=sc.checkpoint_id,
                scale=sc.scale,
                seed=0,
                candidate_id=sc.candidate_id,
            )
        )
    grouped = group_candidates(cands)
    rng = np.random.default_rng(args.seed)

    prefs_dir = cfg.data_root / "prefs"
    prefs_dir.mkdir(parents=True, exist_ok=True)
    log_path = prefs_dir / "matchups.jsonl"

    served_by_id = {sc.candidate_id: sc for sc in served}
    records = []
    seq = 0
    with open(log_path, "a") as fh:
        for key in sorted(grouped):
            phantom = ds.phantoms[key]
            rater = Rater(
                kind="oracle",
                score_fn=lambda img, p=phantom: oracle_artifact_score(img, p),
                rater_id="oracle",
            )
            rec, log = run_tournament(grouped[key], rater, rng)
            records.append(rec)
            for m in log:
                line = matchup_record(
                    f"m{seq:06d}", key,
                    served_by_id[m.left.candidate_id], served_by_id[m.right.candidate_id],
                    m.outcome, m.rater_id, pool_size=rec.pool_size,
                )
                fh.write(json.dumps(line) + "\n")
                seq += 1

    run = new_run_dir(cfg.data_root, "tournament")
    write_manifest(
        run, "tournament", cfg.snapshot(), args.seed,
        extra={"groups": len(grouped), "matchups": seq, "log": str(log_path)},
    )
    print(f"{len(records)} winners from {seq} matchups -> {log_path}")
    return 0


def _cmd_serve(cfg: ProjectConfig, args) -> int:
    cand_dir = Path(args.candidates) if args.candidates else cfg.data_root / "candidates"
    served = load_candidate_index(cand_dir / "index.jsonl")
    prefs_dir = cfg.data_root / "prefs"
    prefs_dir.mkdir(parents=True, exist_ok=True)
    coord = TournamentCoordinator(served, prefs_dir / "matchups.jsonl", cfg.data_root)
    host = args.host or cfg.host
    port = cfg.port if args.port is None else args.port
    httpd = make_server(coord, host, port)
    run = new_run_dir(cfg.data_root, "serve")
    write_manifest(
        run, "serve", cfg.snapshot(), None,
        extra={"groups": len(coord.groups), "candidates": len(served),
               "log": str(prefs_dir / "matchups.jsonl")},
    )
    print(f"serving tournaments on http://{host}:{httpd.server_address[1]} "
          f"({len(coord.groups)} groups); Ctrl-C to stop")
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.server_close()
    return 0


_CASE_RE = re.compile(r"^(?P<subject>.+)_(?P<slice>\d+)\.img$")


def _cmd_eval(cfg: ProjectConfig, args) -> int:
    from .figures import save_metrics_summary, save_subtraction_map

    pred_dir, ref_dir = Path(args.pred), Path(args.ref)
    names = sorted(p.name for p in pred_dir.glob("*.img"))
    if not names:
        raise RuntimeError(f"no .img files in {pred_dir}")

    ds = load_dataset(Path(args.dataset)) if args.dataset else None
    report = MetricsReport()
    maps_to_render = []
    for name in names:
        ref_path = ref_dir / name
        if not ref_path.exists():
            raise RuntimeError(f"missing reference for {name}")
        a = imgio.read_image(pred_dir / name)
        b = imgio.read_image(ref_path)
        subject, slice_id = name, 0
        m = _CASE_RE.match(name)
        if m:
            subject, slice_id = m.group("subject"), int(m.group("slice"))
        row = CaseMetrics(
            subject=subject, slice_id=slice_id,
            rmse=rmse(a, b), ssim=ssim(a, b), dice=dice(a, b),
        )
        if ds is not None and (subject, slice_id) in ds.phantoms:
            p = ds.phantoms[(subject, slice_id)]
            z0 = imgio.read_image(Path(args.dataset) / subject / f"z0_{slice_id:03d}.img")
            row.artifact_before = oracle_artifact_score(z0, p)
            row.artifact_after = oracle_artifact_score(a, p)
        report.rows.append(row)
        if len(maps_to_render) < args.max_maps:
            maps_to_render.append((name, a, b))

    out = Path(args.out) if args.out else cfg.data_root / "reports" / "latest"
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    report.write_json(out / "aggregates.json")
    save_metrics_summary(out / "summary.png", report, title=f"{pred_dir.name} vs {ref_dir.name}")
    for name, a, b in maps_to_render:
        save_subtraction_map(out / f"diff_{name.removesuffix('.img')}.png", a, b)

    run = new_run_dir(cfg.data_root, "eval")
    write_manifest(
        run, "eval", cfg.snapshot(), None,
        extra={"cases": len(report.rows), "aggregates": report.aggregates(),
               "report": str(out)},
    )
    agg = report.aggregates()
    print(f"eval {len(report.rows)} cases: rmse {agg['rmse']['mean']:.4f}, "
          f"ssim {agg['ssim']['mean']:.4f} -> {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
