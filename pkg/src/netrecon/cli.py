"""Command-line interface: simulate, reconstruct, benchmark, dsf.

Shared flags: --seed (drives every random choice), --config (key-value
file supplying defaults that explicit flags override), --out.  Exit codes:
0 success, 1 usage error, 2 runtime error.  All output files are
deterministic functions of the configuration and seed.
"""

import argparse
import logging
import sys

import numpy as np

from .bench import BenchConfig, run_benchmark
from .dsf import boolean_structure, default_q_points, dsf_from_state_space, save_dsf_result
from .fileio import FileFormatError, LineReader
from .model import (generate_random_network, load_dataset_csv, load_model,
                    save_dataset_csv, save_model, simulate)
from .reconstruct import ReconConfig, reconstruct, save_result
from .sbl import SBLOptions

__all__ = ["cli_main", "main", "load_config"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def load_config(path):
    """Parse a key-value config file ('key = value' or 'key value' lines,
    '#' comments); returns a dict of raw strings."""
    reader = LineReader(path)
    out = {}
    while not reader.at_end():
        line = reader.next_line()
        if "=" in line:
            key, _, value = line.partition("=")
        else:
            key, _, value = line.partition(" ")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            reader.error(f"expected 'key = value', found '{line}'")
        out[key] = value
    return out


def _coerce(raw, kind, key, path="<config>"):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes"):
                return True
            if low in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if kind is list:
            return [float(v) for v in raw.split(",") if v.strip()]
        return kind(raw)
    except ValueError:
        raise FileFormatError(path, 0, f"field '{key}': cannot parse {raw!r}")


# config-file key -> (BenchConfig field, type)
_BENCH_KEYS = {
    "n_networks": ("n_networks", int), "p": ("p", int),
    "n_true": ("n_true", int), "n_assumed": ("n_assumed", int),
    "m": ("m", int), "density": ("density", float),
    "n_samples": ("N_samples", int), "snr_list": ("snr_list", list),
    "failure_precision_threshold": ("failure_precision_threshold", float),
    "seed": ("seed", int), "parallelism": ("parallelism", int),
}
_RECON_KEYS = {
    "mask_mode": str, "p22": int, "prior_mode": str, "outer_max_iter": int,
    "outer_tol": float, "structure_rel_tol": float, "sigma2_init": float,
    "inner_max_iter": int, "inner_tol": float, "inner_prune_tol": float,
    "inner_eps": float, "inner_sigma2_denominator": str,
}


def _derive_seed(*entropy):
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


def _build_parser():
    parser = _Parser(prog="netrecon",
                     description="Sparse dynamic-network reconstruction "
                                 "from input/output time series.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    sim = sub.add_parser("simulate", help="generate a random system and "
                                          "simulate a dataset")
    sim.add_argument("--p", type=int, help="number of measured outputs")
    sim.add_argument("--n", type=int, help="true state dimension")
    sim.add_argument("--m", type=int, help="number of inputs (must equal p)")
    sim.add_argument("--density", type=float, help="A sparsity density in (0,1]")
    sim.add_argument("--n-samples", type=int, help="number of output samples")
    sim.add_argument("--snr-db", type=float, default=None)
    sim.add_argument("--model-in", default=None,
                     help="simulate this model file instead of generating")
    sim.add_argument("--model-out", default=None,
                     help="write the generated model here")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--config", default=None)
    sim.add_argument("--out", required=True, help="dataset CSV path")

    rec = sub.add_parser("reconstruct", help="reconstruct a network from a "
                                             "dataset CSV")
    rec.add_argument("--data", required=True)
    rec.add_argument("--n-states", type=int)
    rec.add_argument("--mask", choices=["diag-b", "p-diag"], default=None)
    rec.add_argument("--p22", type=int, default=None)
    rec.add_argument("--outer-max-iter", type=int, default=None)
    rec.add_argument("--outer-tol", type=float, default=None)
    rec.add_argument("--inner-max-iter", type=int, default=None)
    rec.add_argument("--inner-tol", type=float, default=None)
    rec.add_argument("--structure-rel-tol", type=float, default=None)
    rec.add_argument("--seed", type=int, default=0)
    rec.add_argument("--config", default=None)
    rec.add_argument("--out", required=True, help="result file path")

    ben = sub.add_parser("benchmark", help="run the randomized benchmark sweep")
    ben.add_argument("--config", default=None, help="benchmark config file")
    ben.add_argument("--seed", type=int, default=None)
    ben.add_argument("--parallelism", type=int, default=None)
    ben.add_argument("--records-out", default=None,
                     help="write per-run records CSV here")
    ben.add_argument("--text-out", default=None,
                     help="write the aligned summary table here")
    ben.add_argument("--quiet", action="store_true",
                     help="suppress per-run progress logging")
    ben.add_argument("--out", required=True, help="summary CSV path")

    dsf_p = sub.add_parser("dsf", help="extract the DSF and Boolean structure "
                                       "of a saved model")
    dsf_p.add_argument("--model", required=True)
    dsf_p.add_argument("--rel-tol", type=float, default=1e-4)
    dsf_p.add_argument("--seed", type=int, default=0)
    dsf_p.add_argument("--config", default=None)
    dsf_p.add_argument("--out", default=None, help="DSF result file path")
    return parser


def _setting(args, config, key, kind, default=None, required=False):
    """Flag value if given, else config file value, else default."""
    attr = key.replace("-", "_")
    val = getattr(args, attr, None)
    if val is not None:
        return val
    if config and key in config:
        return _coerce(config[key], kind, key)
    if required and default is None:
        raise _UsageError(f"missing required setting '--{key}' "
                          f"(flag or config file)")
    return default


def _cmd_simulate(args, config):
    seed = _setting(args, config, "seed", int, 0)
    n_samples = _setting(args, config, "n-samples", int, required=True)
    snr_db = _setting(args, config, "snr-db", float, None)
    if args.model_in:
        model, meta = load_model(args.model_in)
        density = meta.get("density")
    else:
        p = _setting(args, config, "p", int, required=True)
        n = _setting(args, config, "n", int, required=True)
        m = _setting(args, config, "m", int, p)
        density = _setting(args, config, "density", float, required=True)
        truth = generate_random_network(p, n, m, density,
                                        seed=_derive_seed(seed, 0))
        model = truth.model
    data = simulate(model, n_samples, "gaussian_iid", snr_db=snr_db,
                    seed=_derive_seed(seed, 1))
    save_dataset_csv(data, args.out)
    if args.model_out:
        save_model(model, args.model_out, seed=seed, density=density)
    print(f"wrote {data.N} samples (p={data.p}, m={data.m}) to {args.out}")
    return 0


def _cmd_reconstruct(args, config):
    data = load_dataset_csv(args.data)
    seed = _setting(args, config, "seed", int, 0)
    mask_flag = _setting(args, config, "mask", str, None)
    mask_mode = {"diag-b": "diag_b", "p-diag": "p_diag", None: None,
                 "diag_b": "diag_b", "p_diag": "p_diag"}[mask_flag]
    inner = SBLOptions(max_iter=30)
    imax = _setting(args, config, "inner-max-iter", int, None)
    if imax is not None:
        inner.max_iter = imax
    itol = _setting(args, config, "inner-tol", float, None)
    if itol is not None:
        inner.tol = itol
    cfg = ReconConfig(
        n_states=_setting(args, config, "n-states", int, required=True),
        mask_mode=mask_mode or "diag_b",
        p22=_setting(args, config, "p22", int, None),
        outer_max_iter=_setting(args, config, "outer-max-iter", int, 50),
        outer_tol=_setting(args, config, "outer-tol", float, 1e-4),
        structure_rel_tol=_setting(args, config, "structure-rel-tol", float, 1e-4),
        inner=inner,
        seed=seed,
    )
    result = reconstruct(data, cfg)
    echo = {
        "data": args.data, "n_states": cfg.n_states,
        "mask_mode": cfg.mask_mode, "p22": cfg.p22 if cfg.p22 is not None else "-",
        "outer_max_iter": cfg.outer_max_iter, "outer_tol": cfg.outer_tol,
        "inner_max_iter": cfg.inner.max_iter, "inner_tol": cfg.inner.tol,
        "structure_rel_tol": cfg.structure_rel_tol, "seed": seed,
    }
    save_result(args.out, result, echo)
    n_edges = int(result.network.q_adj.sum())
    print(f"status={result.status} outer_iterations={len(result.trace)} "
          f"edges={n_edges} -> {args.out}")
    return 0


def _cmd_benchmark(args, config):
    config = config or {}
    kwargs = {}
    for cfg_key, (field_name, kind) in _BENCH_KEYS.items():
        if cfg_key in config:
            kwargs[field_name] = _coerce(config[cfg_key], kind, cfg_key)
    recon = {}
    for key, kind in _RECON_KEYS.items():
        cfg_key = f"recon_{key}"
        if cfg_key in config:
            recon[key] = _coerce(config[cfg_key], kind, cfg_key)
    if recon:
        kwargs["recon"] = recon
    if args.seed is not None:
        kwargs["seed"] = args.seed
    if args.parallelism is not None:
        kwargs["parallelism"] = args.parallelism
    if "snr_list" in kwargs:
        kwargs["snr_list"] = tuple(kwargs["snr_list"])
    bench_cfg = BenchConfig(**kwargs)
    if not args.quiet:
        logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                            format="%(message)s")
    table = run_benchmark(bench_cfg)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(table.to_csv_text())
    text = table.to_table_text()
    if args.text_out:
        with open(args.text_out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    if args.records_out:
        with open(args.records_out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(table.records_csv_text())
    sys.stdout.write(text)
    return 0


def _cmd_dsf(args, config):
    model, meta = load_model(args.model)
    seed = _setting(args, config, "seed", int, 0)
    rel_tol = _setting(args, config, "rel-tol", float, 1e-4)
    sample = dsf_from_state_space(model, default_q_points(seed=seed))
    graph = boolean_structure(sample, rel_tol)
    if args.out:
        save_dsf_result(args.out, sample, graph,
                        extra_header=[f"model {args.model}", f"seed {seed}",
                                      f"rel_tol {rel_tol}"])
    print("Q adjacency (row i, column j: edge j -> i):")
    for row in graph.q_adj:
        print(" ".join(str(int(v)) for v in row))
    return 0


def cli_main(argv=None):
    """Entry point; returns the process exit code instead of raising."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        config = load_config(args.config) if getattr(args, "config", None) else None
        handler = {"simulate": _cmd_simulate, "reconstruct": _cmd_reconstruct,
                   "benchmark": _cmd_benchmark, "dsf": _cmd_dsf}[args.command]
        return handler(args, config)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return 0 if exc.code in (0, None) else 1
    except (FileFormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
