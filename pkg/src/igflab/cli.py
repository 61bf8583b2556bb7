"""Command-line entry points: ``fedtrain``, ``pofu``, ``igf``, ``defend`` and ``lab``.

Exit codes: 0 success, 2 configuration/usage error, 3 stage failure.
``pofu verify`` additionally exits 1 when some row fails the bound.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import binio
from .defenses import METHODS, DefenseConfig, DefenseError, apply_defense
from .fedsim import load_checkpoint, save_checkpoint, set_deterministic, train_federated
from .harness.config import ConfigError, load_config
from .harness.grid import emit_grid, emit_tiles
from .harness.pipeline import (
    StageError,
    compare_reductions,
    make_split,
    prepare_data,
    run_pipeline,
    unlearn_method_meta,
    unlearn_model,
    verify_run,
)
from .igf import (
    InversionModelSpec,
    collect_aux_gradients,
    fit_projection,
    load_basis,
    load_grad_matrix,
    load_inversion,
    save_basis,
    save_grad_matrix,
    save_inversion,
    train_inversion,
)
from .perceptual import PerceptualExtractor
from .pofu import compute_pofu, load_pofu, save_pofu, verify_pofu

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2, 3


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _guard(fn, args) -> int:
    try:
        return fn(args)
    except (ConfigError, DefenseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (OSError, ValueError, RuntimeError, binio.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


def _parser(prog: str, doc: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=prog, description=doc)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def _setup(args) -> None:
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    set_deterministic()


def _run(parser: argparse.ArgumentParser, argv) -> int:
    args = parser.parse_args(argv)
    _setup(args)
    return _guard(args.func, args)


# --------------------------------------------------------------------------
# fedtrain
# --------------------------------------------------------------------------


def _fedtrain(args) -> int:
    config = load_config(args.config)
    data = prepare_data(config)
    out = Path(args.out)
    stamp = {"fingerprint": config.fingerprint, "seed": config.seed}
    result = train_federated(config.federation, data.spec, data.clients, checkpoint_dir=out, extra_meta=stamp)
    save_checkpoint(out / "original.ckpt", result.params, data.spec, round=config.federation.rounds,
                    seed=config.federation.seed, meta={**stamp, "role": "original"})
    written = [str(p) for p in result.checkpoints] + [str(out / "original.ckpt")]
    if args.unlearn:
        theta = unlearn_model(config, data.spec, result.params, make_split(config, data))
        save_checkpoint(out / "unlearned.ckpt", theta, data.spec, seed=config.federation.seed,
                        meta={**stamp, **unlearn_method_meta(config), "role": "unlearned"})
        written.append(str(out / "unlearned.ckpt"))
    _print({"checkpoints": written})
    return EXIT_OK


def fedtrain_main(argv=None) -> int:
    p = _parser("fedtrain", "Federated training from an experiment config.")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--unlearn", action="store_true", help="also run the configured unlearning method")
    p.set_defaults(func=_fedtrain)
    return _run(p, argv)


# --------------------------------------------------------------------------
# pofu
# --------------------------------------------------------------------------


def _pofu_compute(args) -> int:
    config = load_config(args.config)
    original, spec, _ = load_checkpoint(args.original)
    unlearned, _, _ = load_checkpoint(args.unlearned)
    split = make_split(config, prepare_data(config))
    out = Path(args.out)
    written = []
    for cid in split.scenario.unlearned_clients:
        rec = compute_pofu(original, unlearned, spec, split.forgotten_by_client[cid], split.scenario.kind)
        rec = dataclasses.replace(rec, meta={"fingerprint": config.fingerprint, "seed": config.seed})
        written.append(str(save_pofu(out / f"client_{cid:03d}.pofu", rec)))
    _print({"pofu": written})
    return EXIT_OK


def _pofu_verify(args) -> int:
    verdicts = {}
    ok = True
    for path in args.pofu:
        v = verify_pofu(load_pofu(path), args.tau)
        verdicts[path] = v.to_dict()
        ok &= v.overall
    _print(verdicts)
    return EXIT_OK if ok else EXIT_FAIL


def pofu_main(argv=None) -> int:
    p = _parser("pofu", "Compute or verify proofs of federated unlearning.")
    sub = p.add_subparsers(dest="cmd", required=True)
    c = sub.add_parser("compute", help="gradient differences on the forgotten samples")
    c.add_argument("--config", required=True)
    c.add_argument("--original", required=True)
    c.add_argument("--unlearned", required=True)
    c.add_argument("--out", required=True, help="output directory")
    c.set_defaults(func=_pofu_compute)
    v = sub.add_parser("verify", help="check every row norm against tau")
    v.add_argument("--pofu", required=True, nargs="+")
    v.add_argument("--tau", required=True, type=float)
    v.set_defaults(func=_pofu_verify)
    return _run(p, argv)


# --------------------------------------------------------------------------
# igf
# --------------------------------------------------------------------------


def _igf_collect(args) -> int:
    config = load_config(args.config)
    original, spec, _ = load_checkpoint(args.original)
    unlearned, _, _ = load_checkpoint(args.unlearned)
    data = prepare_data(config)
    grads = collect_aux_gradients(original, unlearned, spec, *data.aux,
                                  provenance={"fingerprint": config.fingerprint, "seed": config.seed,
                                              "aux_source": config.attack.aux_source})
    save_grad_matrix(args.out, grads)
    _print({"out": args.out, "m": grads.shape[0], "d": grads.shape[1]})
    return EXIT_OK


def _igf_fit(args) -> int:
    grads = load_grad_matrix(args.grads)
    basis = fit_projection(grads, args.nu, not args.no_center, args.method)
    save_basis(args.out, basis, meta={k: grads.provenance[k] for k in ("fingerprint", "seed")
                                      if k in grads.provenance})
    _print(basis.describe())
    return EXIT_OK


def _igf_train(args) -> int:
    config = load_config(args.config)
    a = config.attack
    data = prepare_data(config)
    grads = load_grad_matrix(args.grads)
    basis = load_basis(args.basis)
    z = basis.project(grads.rows)
    beta = a.beta if args.beta is None else args.beta
    spec = InversionModelSpec(z.shape[1], data.spec.input_shape, a.seed_channels, a.seed_size, tuple(a.widths), beta)
    extractor = PerceptualExtractor(config.metrics.perceptual, seed=config.metrics.perceptual_seed) if beta > 0 else None
    trained = train_inversion(spec, z, data.aux[0], lr=a.lr, batch_size=a.batch_size,
                              epochs=args.epochs or a.epochs, seed=a.seed, extractor=extractor)
    save_inversion(args.out, trained, meta={"fingerprint": config.fingerprint, "seed": config.seed})
    _print({"out": args.out, "final_loss": trained.loss_curve[-1] if trained.loss_curve else None})
    return EXIT_OK


def _igf_reconstruct(args) -> int:
    basis = load_basis(args.basis)
    trained = load_inversion(args.model)
    record = load_pofu(args.pofu)
    recon = trained(basis.project(record.rows))
    text = {"pofu": Path(args.pofu).name, "defense": json.dumps(record.defense)}
    if args.config:
        config = load_config(args.config)
        split = make_split(config, prepare_data(config))
        originals = split.forgotten_by_client[record.client_id].images
        emit_grid(originals, recon, args.out_grid, text={**text, "fingerprint": config.fingerprint})
    else:
        emit_tiles(recon, args.out_grid, text=text)
    _print({"grid": args.out_grid, "n": len(recon)})
    return EXIT_OK


def igf_main(argv=None) -> int:
    p = _parser("igf", "Gradient-difference inversion attack.")
    sub = p.add_subparsers(dest="cmd", required=True)
    c = sub.add_parser("collect", help="aux-set gradient differences")
    c.add_argument("--config", required=True)
    c.add_argument("--original", required=True)
    c.add_argument("--unlearned", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=_igf_collect)
    f = sub.add_parser("fit-basis", help="SVD basis of the collected rows")
    f.add_argument("--grads", required=True)
    f.add_argument("--nu", type=float, default=0.95)
    f.add_argument("--no-center", action="store_true", help="project incoming rows without subtracting the mean")
    f.add_argument("--method", choices=("auto", "gram", "svd"), default="auto")
    f.add_argument("--out", required=True)
    f.set_defaults(func=_igf_fit)
    t = sub.add_parser("train", help="train the inversion model")
    t.add_argument("--config", required=True)
    t.add_argument("--grads", required=True)
    t.add_argument("--basis", required=True)
    t.add_argument("--beta", type=float, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=_igf_train)
    r = sub.add_parser("reconstruct", help="invert a PoFU file and draw a grid")
    r.add_argument("--basis", required=True)
    r.add_argument("--model", required=True)
    r.add_argument("--pofu", required=True)
    r.add_argument("--out-grid", required=True)
    r.add_argument("--config", help="pair reconstructions with ground truth from this config")
    r.set_defaults(func=_igf_reconstruct)
    return _run(p, argv)


# --------------------------------------------------------------------------
# defend
# --------------------------------------------------------------------------


def _defend(args) -> int:
    cfg = DefenseConfig(method=args.method, prune_fraction=args.prune_fraction, sigma=args.sigma,
                        perturb_scale=args.perturb_scale, perturb_factor=args.perturb_factor,
                        smooth_window=args.smooth_window, smooth_alpha=args.smooth_alpha,
                        sign_scale=args.sign_scale, seed=args.seed)
    record = load_pofu(args.pofu)
    try:
        out = apply_defense(record, cfg)
    except DefenseError as exc:  # the parameters were valid; the proof is not
        raise StageError("defend", exc) from exc
    save_pofu(args.out, out)
    norms_in = np.linalg.norm(record.rows.astype(np.float64), axis=1)
    norms_out = np.linalg.norm(out.rows.astype(np.float64), axis=1)
    _print({"out": args.out, "defense": out.defense, "max_norm_change": float(np.max(np.abs(norms_in - norms_out)))})
    return EXIT_OK


def defend_main(argv=None) -> int:
    p = _parser("defend", "Apply a client-side defense to a PoFU file.")
    d = DefenseConfig()
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--pofu", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prune-fraction", type=float, default=d.prune_fraction)
    p.add_argument("--sigma", type=float, default=d.sigma)
    p.add_argument("--perturb-scale", type=float, default=d.perturb_scale)
    p.add_argument("--perturb-factor", type=float, default=d.perturb_factor)
    p.add_argument("--smooth-window", type=int, default=d.smooth_window)
    p.add_argument("--smooth-alpha", type=float, default=d.smooth_alpha)
    p.add_argument("--sign-scale", type=float, default=d.sign_scale)
    p.add_argument("--seed", type=int, default=d.seed)
    p.set_defaults(func=_defend)
    return _run(p, argv)


# --------------------------------------------------------------------------
# lab
# --------------------------------------------------------------------------


def _lab_run(args) -> int:
    config = load_config(args.config)
    if args.out:
        config.output_dir = args.out
    res = run_pipeline(config, resume=not args.fresh)
    _print({"run_dir": str(res.run_dir), "summary": res.summary})
    return EXIT_OK


def _lab_verify(args) -> int:
    try:
        result = verify_run(args.run)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read run config: {exc}") from exc
    _print(result)
    return EXIT_OK if result["ok"] else EXIT_STAGE


def _lab_compare(args) -> int:
    config = load_config(args.config)
    if args.out:
        config.output_dir = args.out
    rows = compare_reductions(config)
    cols = ["method", "original_dims", "stored_dims", "mse", "psnr", "lpips"]
    print("  ".join(f"{c:>13}" for c in cols))
    for row in rows:
        print("  ".join(f"{row[c]:>13.5g}" if isinstance(row[c], float) else f"{row[c]!s:>13}" for c in cols))
    return EXIT_OK


def lab_main(argv=None) -> int:
    p = _parser("lab", "Config-driven experiment runs.")
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run every stage of a config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="override output_dir")
    r.add_argument("--fresh", action="store_true", help="recompute stages even if their artifacts exist")
    r.set_defaults(func=_lab_run)
    v = sub.add_parser("verify", help="check artifact fingerprints of a run directory")
    v.add_argument("--run", required=True)
    v.set_defaults(func=_lab_verify)
    c = sub.add_parser("compare-reductions", help="SVD path vs hash path on the same config")
    c.add_argument("--config", required=True)
    c.add_argument("--out", help="override output_dir")
    c.set_defaults(func=_lab_compare)
    return _run(p, argv)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(lab_main())
