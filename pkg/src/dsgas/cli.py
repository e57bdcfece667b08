"""Command-line entry point: search, eval, export, gradcheck, synth."""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks
from .evaluate import PROTOCOLS, ProbeProtocol, export_dot, linear_probe
from .graphio import default_factor_specs, make_synthetic_factors, write_tudataset
from .trainer import SearchDiverged, load_config, parse_factor_sections, restore_state, run_unsupervised_search


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dsgas", description="Unsupervised disentangled graph architecture search.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run the alternating search")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--resume", type=Path, help="continue from a checkpoint")
    s.add_argument("--epochs", type=int, help="override [search] epochs")
    s.add_argument("--detach-posterior", action="store_true",
                   help="stop gradients from the factor posterior into the embeddings")

    e = sub.add_parser("eval", help="linear probe on a checkpoint's embeddings")
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--protocol", choices=PROTOCOLS, default=PROTOCOLS[0])
    e.add_argument("--seed", type=int, default=0)

    x = sub.add_parser("export", help="write the discretized architecture as DOT")
    x.add_argument("--checkpoint", required=True, type=Path)
    x.add_argument("--out", required=True, type=Path)

    g = sub.add_parser("gradcheck", help="finite-difference check of both search losses")
    g.add_argument("--seeds", type=int, default=10)
    g.add_argument("--coords", type=int, default=2, help="sampled entries per tensor (0 = all)")

    y = sub.add_parser("synth", help="write a planted-factor dataset in TUDataset layout")
    y.add_argument("--spec", required=True, type=Path)
    y.add_argument("--out", required=True, type=Path)
    return p


def _search(args) -> int:
    config = load_config(args.config)
    if args.epochs is not None:
        config.epochs = args.epochs
    if args.detach_posterior:
        config.detach_posterior = True
    result = run_unsupervised_search(config, resume=args.resume)
    print(json.dumps(result.architecture.to_dict(), indent=2))
    if result.loss_w:
        print(f"final L_w {result.loss_w[-1]:.5f}  L_alpha {result.loss_alpha[-1]:.5f}")
    print(f"checkpoint: {result.checkpoint}  ({result.wallclock_s:.1f} s)")
    return 0


def _eval(args) -> int:
    state = restore_state(args.checkpoint)
    kind = args.protocol
    if (kind == "logreg_splits_node") != (state.config.task == "node_level"):
        print(f"warning: protocol {kind} on a {state.config.task} checkpoint", file=sys.stderr)
    Z, _ = state.final_outputs()
    report = linear_probe(Z, state.dataset.labels(), ProbeProtocol(kind, seed=args.seed))
    print(f"ProbeReport {kind}: {report}")
    return 0


def _export(args) -> int:
    state = restore_state(args.checkpoint)
    arch = state.net.discretize()
    args.out.write_text(export_dot(arch, arch.num_factors), encoding="utf-8")
    print(f"wrote {args.out}")
    return 0


def _gradcheck(args) -> int:
    worst = 0.0
    for case in checks.gradcheck_suite(range(args.seeds), args.coords or None):
        worst = max(worst, case.max_rel_error)
        print(f"seed {case.seed} ({case.augmentation}): L_w {case.loss_w.max_rel_error:.2e} "
              f"L_alpha {case.loss_alpha.max_rel_error:.2e} "
              f"[{case.loss_w.checked + case.loss_alpha.checked} coords, "
              f"{case.loss_w.skipped_kinks + case.loss_alpha.skipped_kinks} kinks skipped]")
    print(f"max rel. error {worst:.3e} (tolerance {checks.TOLERANCE:g})")
    return 0 if worst < checks.TOLERANCE else 1


def _synth(args) -> int:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    with open(args.spec, encoding="utf-8") as fh:
        parser.read_file(fh)
    sec = parser["synthetic"] if parser.has_section("synthetic") else {}
    factors = parse_factor_sections(parser) or default_factor_specs()
    name = sec.get("name", "SYNTH")
    ds = make_synthetic_factors(int(sec.get("graphs", 400)), factors, seed=int(sec.get("seed", 0)),
                                noise=float(sec.get("noise", 0.1)))
    write_tudataset(ds, args.out, name)
    counts = np.bincount(ds.labels(), minlength=ds.num_classes)
    print(f"wrote {len(ds)} graphs ({ds.num_classes} classes, sizes {counts.tolist()}) to {args.out / name}_*.txt")
    return 0


COMMANDS = {"search": _search, "eval": _eval, "export": _export, "gradcheck": _gradcheck, "synth": _synth}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError, SearchDiverged) as exc:
        print(f"dsgas {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
