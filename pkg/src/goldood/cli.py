"""Command-line front end: ``goldood prepare | make-sbm | train | eval``.

Exit codes: 0 success, 2 usage/config/data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .data import DatasetBundle, OodRecipe, apply_recipe, load_dataset, make_sbm_toy, save_dataset
from .errors import ContractError, DataLoadError, NonFiniteError
from .evaluation import evaluate, write_histogram_csv
from .generators import sample_pseudo_ood
from .models import DetectorMlp, GcnModel, GoldModel, load_checkpoint, save_checkpoint, store_from
from .pipeline import BASELINES, TrainConfig, build_generator, train_baseline, train_gold, write_manifest

log = logging.getLogger("goldood")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
TRAIN_METHODS = ("gold",) + BASELINES
SCORING = {"gold": "gold", "msp": "msp", "energy": "energy", "gnnsafe": "gnnsafe", "gnnsafe_pp": "gnnsafe"}


class UsageError(Exception):
    pass


def _int_list(text):
    if not text:
        return ()
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def resolve_config(config_path=None, overrides=(), seed=None):
    """Defaults, then the flat JSON file, then ``--set`` pairs, then ``--seed``."""
    flat = {}
    if config_path:
        try:
            flat = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file {config_path} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {config_path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
        if not isinstance(flat, dict):
            raise UsageError(f"config file {config_path} must hold a flat object of dotted keys")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            flat[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            flat[key.strip()] = value
    if seed is not None:
        flat["seed"] = seed
    return TrainConfig.from_flat(flat)


def cmd_make_sbm(args):
    g = make_sbm_toy(args.n_per_class, args.p_in, args.p_out, args.dim, args.classes, args.seed)
    save_dataset(DatasetBundle(g), args.out_dir)
    log.info("wrote SBM fixture with %d nodes to %s", g.n, args.out_dir)


def cmd_prepare(args):
    bundle = load_dataset(args.dataset_dir)
    recipe = OodRecipe(
        args.recipe,
        seed=args.seed if args.seed is not None else 0,
        rewire_fraction=args.rewire_fraction,
        left_out=_int_list(args.left_out),
        ignore=_int_list(args.ignore),
    )
    if recipe.kind == "leaveout" and not recipe.left_out:
        raise UsageError("leaveout needs --left-out")
    out = apply_recipe(bundle, recipe, args.name)
    save_dataset(out, args.out_dir)
    log.info("wrote %s with OOD sets %s", args.out_dir, sorted(out.ood_sets))


def _checkpoint_meta(method, cfg, gcn, det, gen):
    return {
        "method": method,
        "config": cfg.to_flat(),
        "gcn": {"in_dim": gcn.in_dim, "hidden": gcn.hidden, "num_classes": gcn.num_classes, "layers": gcn.layers},
        "detector": None if det is None else {"hidden": det.hidden, "layers": det.layers},
        "generator": None if gen is None else gen.kind,
    }


def cmd_train(args):
    cfg = resolve_config(args.config, args.set or (), args.seed)
    method = args.method
    bundle = load_dataset(args.dataset_dir)
    g = bundle.id_graph
    exposure = None
    if args.exposure is not None:
        if method != "gnnsafe_pp":
            raise UsageError("--exposure is only used by gnnsafe_pp")
        if args.exposure not in bundle.ood_sets:
            raise UsageError(f"no OOD set named {args.exposure!r}; have {sorted(bundle.ood_sets)}")
        exposure = bundle.ood_sets[args.exposure]
    elif method == "gnnsafe_pp":
        raise UsageError("gnnsafe_pp needs --exposure NAME (an OOD set of the dataset)")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    history, gen = None, None
    if method == "gold":
        model, gen, history = train_gold(g, cfg)
    else:
        model = train_baseline(g, method, cfg, exposure)
    wall = time.perf_counter() - start

    stores = [model.gcn.store]
    if model.detector is not None:
        stores.append(model.detector.store)
    if gen is not None:
        stores.append(gen.store)
    save_checkpoint(out_dir, stores, _checkpoint_meta(method, cfg, model.gcn, model.detector, gen))
    extra = {"dataset_digest": g.digest()}
    if exposure is not None:
        extra["exposure"] = args.exposure
    write_manifest(out_dir, cfg, method, history, round(wall, 3), extra)
    log.info("trained %s in %.1fs, checkpoint in %s", method, wall, out_dir)


def load_run(checkpoint_dir):
    """Rebuild ``(GoldModel, generator_or_None, TrainConfig, meta)`` from a train output."""
    try:
        params, meta = load_checkpoint(checkpoint_dir)
    except FileNotFoundError as exc:
        raise UsageError(f"no checkpoint in {checkpoint_dir}: {exc.filename}") from None
    try:
        cfg = TrainConfig.from_flat(meta["config"])
        arch = meta["gcn"]
        method = meta["method"]
    except KeyError as exc:
        raise UsageError(f"checkpoint metadata lacks {exc}") from None
    if method not in TRAIN_METHODS:
        raise UsageError(f"checkpoint has unknown method {method!r}")
    gcn = GcnModel(arch["in_dim"], arch["hidden"], arch["num_classes"], arch["layers"], store_from(params, "gcn."))
    det = None
    if meta.get("detector"):
        det = DetectorMlp(meta["detector"]["hidden"], meta["detector"]["layers"], store_from(params, "det."))
    gen = None
    if meta.get("generator"):
        gen = build_generator(cfg, arch["hidden"], np.random.default_rng(0))
        gen.store = store_from(params, f"{gen.kind}.")
    return GoldModel(gcn, det, method), gen, cfg, meta


def cmd_eval(args):
    model, gen, cfg, meta = load_run(args.checkpoint_dir)
    bundle = load_dataset(args.dataset_dir)
    d = bundle.id_graph.num_features
    if d != model.gcn.in_dim:
        raise UsageError(f"checkpoint expects {model.gcn.in_dim} features but the dataset has {d}")
    if bundle.id_graph.num_classes != model.gcn.num_classes:
        raise UsageError(
            f"checkpoint predicts {model.gcn.num_classes} classes but the dataset has {bundle.id_graph.num_classes}"
        )
    if not bundle.ood_sets:
        raise UsageError(f"dataset {args.dataset_dir} has no OOD sets; run 'goldood prepare' first")
    pood = None
    if gen is not None:
        train = bundle.id_graph.masks.get("train")
        m = cfg.n_pood or (train.size if train is not None and train.size else bundle.id_graph.n)
        pood = sample_pseudo_ood(gen, m, np.random.default_rng(cfg.seed))
    report = evaluate(model, bundle, cfg.alpha, cfg.k, SCORING[meta["method"]], pood, args.bins)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"trained_method": meta["method"], **report.to_json()}
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for name, hist in sorted(report.histograms.items()):
        write_histogram_csv(out_dir / f"hist_{name}.csv", hist)
    for name, block in sorted(report.subsets.items()):
        log.info("%s: AUROC %.2f  AUPR %.2f  FPR95 %.2f", name, block["auroc"], block["aupr"], block["fpr95"])


def build_parser():
    parser = argparse.ArgumentParser(prog="goldood", description="Graph OOD detection with latent pseudo-OOD generation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-sbm", help="write a stochastic-block-model fixture dataset")
    p.add_argument("out_dir")
    p.add_argument("--n-per-class", type=int, default=250)
    p.add_argument("--p-in", type=float, default=0.05)
    p.add_argument("--p-out", type=float, default=0.005)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_sbm)

    p = sub.add_parser("prepare", help="add a synthetic OOD set to a dataset")
    p.add_argument("dataset_dir")
    p.add_argument("out_dir")
    p.add_argument("--recipe", choices=("structure", "feature", "leaveout"), required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--rewire-fraction", type=float, default=1.0)
    p.add_argument("--left-out", help="comma-separated class ids held out as OOD")
    p.add_argument("--ignore", help="comma-separated class ids dropped from both sides")
    p.add_argument("--name", help="name of the OOD set (default: the recipe kind)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train GOLD or a baseline")
    p.add_argument("dataset_dir")
    p.add_argument("out_dir")
    p.add_argument("--config", help="flat JSON file of dotted config keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=TRAIN_METHODS, default="gold")
    p.add_argument("--exposure", metavar="NAME", help="OOD set exposed to gnnsafe_pp")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a trained checkpoint against every OOD set")
    p.add_argument("checkpoint_dir")
    p.add_argument("dataset_dir")
    p.add_argument("out_dir")
    p.add_argument("--bins", type=int, default=50)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (UsageError, ContractError, DataLoadError) as exc:
        print(f"goldood {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"goldood {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
