"""Command-line pipeline: synth, train, score, curvature, report.

One YAML config drives every stage; flags override config values.  Exit
codes: 0 success, 2 invalid configuration/arguments, 3 numerical abort,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

__all__ = ["main"]

_OUTPUT_ROOT_ENV = "GEOWARP_OUTPUT_ROOT"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geowarp",
        description=(
            "Quantify the geometric misalignment between a graph's connectivity "
            "and its node-attribute manifold."
        ),
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="best-effort cap on BLAS thread pools (also recorded "
                             "in the run manifest)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", default=None, help="YAML config file")
        p.add_argument("-o", "--out", default=None,
                       help=f"output directory (default: ${_OUTPUT_ROOT_ENV}/<command>)")
        p.add_argument("--seed", type=int, default=None, help="override config seed")

    p = sub.add_parser("synth", help="generate the synthetic dataset bundle")
    common(p)
    p.add_argument("--n", type=int, default=None, help="override node count")
    p.add_argument("--group-size", type=int, default=None, help="override perturbed-group size")

    p = sub.add_parser("train", help="run the two training phases on a bundle")
    common(p)
    p.add_argument("--bundle", required=True, help="dataset bundle directory")
    p.add_argument("--phase", choices=["1", "2", "both"], default="both")
    p.add_argument("--estimator", choices=["grid", "linear"], default=None)
    p.add_argument("--latent-dim", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None, help="override phase-1 epochs")
    p.add_argument("--phase2-epochs", type=int, default=None)
    p.add_argument("--phase1-checkpoint", default=None,
                   help="resume phase 2 from this phase-1 checkpoint")

    p = sub.add_parser("score", help="distortion report from two distance snapshots")
    common(p)
    p.add_argument("--before", required=True, help="phase-1 distance matrix (csv)")
    p.add_argument("--after", required=True, help="phase-2 distance matrix (csv)")
    p.add_argument("--labels", default=None, help="ground-truth label file")
    p.add_argument("--edges", default=None,
                   help="edge-list file (needed for score.pair_set=edges)")

    p = sub.add_parser("curvature", help="Gaussian-curvature grid from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tag", default="phase", help="label used in the dump filename")
    p.add_argument("--resolution", type=int, default=None)

    p = sub.add_parser("report", help="summarize a finished run directory")
    p.add_argument("--run", required=True, help="run directory with manifests")
    return parser


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(_OUTPUT_ROOT_ENV, "runs")
    return Path(root) / default_name


def _load_cfg(args, extra_overrides: dict | None = None):
    from .config import load_config

    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    overrides.update(extra_overrides or {})
    return load_config(args.config, overrides)


def _dump_matrix(path, M, header):
    import numpy as np

    np.savetxt(path, M, delimiter=",", fmt="%.17g", header=header, comments="# ")


def cmd_synth(args) -> int:
    from . import synth
    from .manifest import RunManifest, StageTimer

    cfg = _load_cfg(args, {
        "synth.n": args.n,
        "synth.group_size": args.group_size,
    })
    outdir = _out_dir(args, "synth")
    outdir.mkdir(parents=True, exist_ok=True)
    spec = synth.ManifoldSpec(
        n=cfg.synth.n, ambient_dim=cfg.synth.ambient_dim, r0=cfg.synth.r0,
        spread=cfg.synth.spread, twist=cfg.synth.twist, seed=cfg.seed,
    )
    manifest = RunManifest(command="synth", config=cfg.echo(), seed=cfg.seed)
    timer = StageTimer(manifest)
    with timer("synth"):
        bundle = synth.generate_bundle(
            spec, outdir, group_size=cfg.synth.group_size,
            threshold=cfg.synth.similarity_threshold,
        )
    for name, rel in bundle["files"].items():
        manifest.add_output(name, outdir / rel)
    manifest.add_output("bundle_manifest", outdir / "manifest.json")
    manifest.notes["generator"] = bundle["generator"]
    manifest.notes["n_nodes"] = bundle["n_nodes"]
    manifest.notes["n_edges"] = bundle["n_edges"]
    manifest.write(outdir / "run_manifest.json")
    print(f"bundle written to {outdir} ({bundle['n_nodes']} nodes, "
          f"{bundle['n_edges']} edges)")
    return 0


def _model_from_config(cfg, data_dim):
    import numpy as np

    from . import vae

    return vae.build_model(
        data_dim,
        cfg.phase1.latent_dim,
        preset=cfg.phase1.preset,
        encoder_hidden=cfg.phase1.encoder_hidden,
        decoder_hidden=cfg.phase1.decoder_hidden,
        activation=cfg.phase1.activation,
        rng=np.random.default_rng(cfg.seed),
    )


def cmd_train(args) -> int:
    import numpy as np

    from . import alignment, graphs, nn, riemann, synth, vae
    from .manifest import RunManifest, StageTimer

    cfg = _load_cfg(args, {
        "phase2.estimator": args.estimator,
        "phase1.latent_dim": args.latent_dim,
        "phase1.epochs": args.epochs,
        "phase2.epochs": args.phase2_epochs,
    })
    outdir = _out_dir(args, "train")
    outdir.mkdir(parents=True, exist_ok=True)
    graph, intrinsic, bundle_manifest = synth.load_bundle(args.bundle)
    manifest = RunManifest(command="train", config=cfg.echo(), seed=cfg.seed)
    timer = StageTimer(manifest)
    for name, rel in bundle_manifest["files"].items():
        manifest.add_input(name, Path(args.bundle) / rel)

    if args.phase1_checkpoint:
        networks, meta = nn.load_checkpoint(args.phase1_checkpoint)
        model = vae.VaeModel(
            networks["encoder_trunk"], networks["encoder_mu"],
            networks["encoder_logvar"], networks["decoder_mu"],
            networks["decoder_sigma"],
            latent_dim=networks["encoder_mu"].out_dim,
            data_dim=networks["encoder_trunk"].in_dim,
        )
        mu, logvar = vae.encode(model, graph.attributes)
        latent = vae.LatentState.freeze(mu, logvar)
        manifest.add_input("phase1_checkpoint", args.phase1_checkpoint)
    else:
        model = _model_from_config(cfg, graph.data_dim)
        anneal = vae.AnnealSchedule(
            cfg.phase1.anneal_kind, cfg.phase1.anneal_start, cfg.phase1.anneal_end,
            cfg.phase1.anneal_steps or cfg.phase1.epochs or 1,
        )
        p1 = vae.Phase1Config(
            epochs=cfg.phase1.epochs, learning_rate=cfg.phase1.learning_rate,
            lambda_var=cfg.phase1.lambda_var, lambda_resid=cfg.phase1.lambda_resid,
            anneal=anneal, dropout=cfg.phase1.dropout, seed=cfg.seed,
        )
        with timer("phase1"):
            model, latent, trace = vae.train_phase1(model, graph.attributes, p1)
        _dump_matrix(outdir / "phase1_loss.csv", trace[:, None], f"steps {len(trace)}")
        manifest.add_output("phase1_loss", outdir / "phase1_loss.csv")

    bounds = riemann.bounds_from_points(latent.z_fixed, cfg.phase2.bounds_margin)
    nn.save_checkpoint(
        outdir / "phase1.npz", model.networks(), seed=cfg.seed,
        step=cfg.phase1.epochs,
        extra={"bounds": bounds.tolist(), "phase": "phase1",
               "init": "glorot-uniform weights, zero biases except encoder "
                       f"log-variance head at {vae.INITIAL_POSTERIOR_LOGVAR}"},
    )
    _dump_matrix(outdir / "latent.csv", latent.z_fixed, f"nodes {graph.n}")
    manifest.add_output("phase1_checkpoint", outdir / "phase1.npz")
    manifest.add_output("latent", outdir / "latent.csv")

    if args.phase == "1":
        manifest.write(outdir / "run_manifest.json")
        print(f"phase 1 complete; outputs in {outdir}")
        return 0

    with timer("spectrum"):
        lam2, lam_max = graphs.spectral_bounds(graphs.laplacian(graph))
        schedule = graphs.heat_times(lam2, lam_max, cfg.phase2.heat_times)
    p2 = alignment.AlignmentConfig(
        heat_schedule=schedule,
        estimator=cfg.phase2.estimator,
        pairs_per_step=cfg.phase2.pairs_per_step,
        epochs=cfg.phase2.epochs,
        learning_rate=cfg.phase2.learning_rate,
        kernel_scale_mode=cfg.phase2.kernel_scale,
        grid_resolution=cfg.phase2.grid_resolution,
        connectivity=cfg.phase2.connectivity,
        linear_steps=cfg.phase2.linear_steps,
        bounds_margin=cfg.phase2.bounds_margin,
        seed=cfg.seed,
    )
    with timer("phase2"):
        result = alignment.train_phase2(model, latent, graph, p2)

    n = graph.n
    _dump_matrix(outdir / "dist_phase1.csv", result.distances_before, f"nodes {n}")
    _dump_matrix(outdir / "dist_phase2.csv", result.distances_after, f"nodes {n}")
    _dump_matrix(outdir / "phase2_loss.csv", result.loss_trace[:, None],
                 f"steps {len(result.loss_trace)}")
    _dump_matrix(outdir / "alpha_trace.csv", result.alpha_trace[:, None],
                 f"steps {len(result.alpha_trace)}")
    nn.save_checkpoint(
        outdir / "phase2.npz", model.networks(), seed=cfg.seed,
        step=cfg.phase2.epochs,
        extra={"bounds": result.bounds.tolist(), "phase": "phase2"},
    )
    phase2_manifest = {
        "config": cfg.echo()["phase2"],
        "heat_times": [float(t) for t in schedule.times],
        "lambda2": schedule.lambda2,
        "lambda_max": schedule.lambda_max,
        "alpha_trajectory": [float(a) for a in result.alpha_trace],
        "loss_trace": [float(x) for x in result.loss_trace],
        "snapshots": {"phase1": "dist_phase1.csv", "phase2": "dist_phase2.csv"},
        "encoder_digest": {"before": result.encoder_digest_before,
                           "after": result.encoder_digest_after},
        "encoder_gradients_zero": result.encoder_grads_zero,
    }
    with open(outdir / "phase2_manifest.json", "w") as f:
        json.dump(phase2_manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    for name in ("dist_phase1.csv", "dist_phase2.csv", "phase2_loss.csv",
                 "alpha_trace.csv", "phase2.npz", "phase2_manifest.json"):
        manifest.add_output(name.rsplit(".", 1)[0], outdir / name)
    manifest.write(outdir / "run_manifest.json")
    print(f"training complete; outputs in {outdir}")
    return 0


def cmd_score(args) -> int:
    import numpy as np

    from . import graphs, scoring
    from .manifest import RunManifest, StageTimer

    cfg = _load_cfg(args)
    outdir = _out_dir(args, "score")
    outdir.mkdir(parents=True, exist_ok=True)
    before = np.loadtxt(args.before, delimiter=",", comments="#")
    after = np.loadtxt(args.after, delimiter=",", comments="#")
    labels = graphs.read_labels(args.labels) if args.labels else None
    adjacency = None
    if cfg.score.pair_set == "edges":
        if not args.edges:
            raise ValueError("score.pair_set=edges requires --edges")
        adjacency = graphs.read_edge_list(args.edges, before.shape[0])
    manifest = RunManifest(command="score", config=cfg.echo(), seed=cfg.seed)
    manifest.add_input("before", args.before)
    manifest.add_input("after", args.after)
    if args.labels:
        manifest.add_input("labels", args.labels)
    timer = StageTimer(manifest)
    with timer("score"):
        report = scoring.build_report(
            before, after, labels=labels, eps=cfg.score.eps,
            pair_set=cfg.score.pair_set, adjacency=adjacency,
        )
        paths = scoring.write_report(report, outdir)
    for name, p in paths.items():
        manifest.add_output(name, p)
    manifest.write(outdir / "run_manifest.json")
    if report.metrics:
        line = " ".join(f"{k}={v:.4f}" for k, v in sorted(report.metrics.items())
                        if v is not None)
        print(f"scored {before.shape[0]} nodes: {line}")
    else:
        print(f"scored {before.shape[0]} nodes (no labels: threshold rule robust-z>3.5)")
    return 0


def cmd_curvature(args) -> int:
    import numpy as np

    from . import nn, riemann
    from .manifest import RunManifest, StageTimer

    cfg = _load_cfg(args)
    outdir = _out_dir(args, "curvature")
    outdir.mkdir(parents=True, exist_ok=True)
    networks, meta = nn.load_checkpoint(args.checkpoint)
    if networks["decoder_mu"].in_dim != 2:
        raise ValueError(
            "curvature grids need a 2-d latent space "
            f"(checkpoint has d={networks['decoder_mu'].in_dim})"
        )
    bounds = np.asarray(meta["extra"]["bounds"], dtype=float)
    resolution = args.resolution or cfg.phase2.grid_resolution
    manifest = RunManifest(command="curvature", config=cfg.echo(), seed=cfg.seed)
    manifest.add_input("checkpoint", args.checkpoint)
    timer = StageTimer(manifest)
    with timer("curvature"):
        field = riemann.build_metric_field(
            networks["decoder_mu"], networks["decoder_sigma"], bounds, resolution,
            cfg.phase2.connectivity,
        )
        K = riemann.curvature_grid(field)
    out = outdir / f"curvature_{args.tag}.csv"
    _dump_matrix(out, K, f"grid {K.shape[0]}x{K.shape[1]}")
    manifest.add_output("curvature", out)
    manifest.write(outdir / f"run_manifest_{args.tag}.json")
    finite = K[np.isfinite(K)]
    print(f"curvature grid {K.shape[0]}x{K.shape[1]} written to {out} "
          f"(interior range [{finite.min():.4g}, {finite.max():.4g}])")
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    printed = False
    for name in sorted(run.glob("run_manifest*.json")):
        with open(name) as f:
            doc = json.load(f)
        print(f"== {name.name}: command={doc['command']} seed={doc['seed']}")
        for stage, secs in doc.get("timings_seconds", {}).items():
            print(f"   {stage}: {secs:.3f}s")
        for kind in ("inputs", "outputs"):
            for label, entry in doc.get(kind, {}).items():
                print(f"   {kind[:-1]} {label}: {entry['path']} "
                      f"sha256={entry['sha256'][:12]}")
        printed = True
    report_file = run / "report.json"
    if report_file.exists():
        with open(report_file) as f:
            rep = json.load(f)
        if rep.get("metrics"):
            line = " ".join(f"{k}={v:.4f}" for k, v in sorted(rep["metrics"].items())
                            if v is not None)
            print(f"metrics: {line} (threshold {rep['threshold']:.4g})")
        printed = True
    if not printed:
        print(f"no manifests found under {run}")
        return 4
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .alignment import EncoderDriftError
    from .config import ConfigError
    from .nn import NonFiniteGradientError
    from .synth import EmptyGraphError
    from .vae import TrainingDivergedError

    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "score": cmd_score,
        "curvature": cmd_curvature,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, NonFiniteGradientError,
            EncoderDriftError, EmptyGraphError) as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return 3
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
