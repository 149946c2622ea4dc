"""Command line entry point: ``gpdeim {snapshots,build,run,report} --config FILE``.

Exit status is 0 on success, 1 for invalid configuration or missing inputs,
and 2 for numerical failures (Newton divergence, rank or certification
errors, singular interpolation).
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .config import MODES, ConfigError, load_config
from .integrate import IntegrationError, NewtonError
from .pipeline import ArtifactError, cmd_build, cmd_report, cmd_run, cmd_snapshots
from .reduce import BasisCertificationError, RankError

log = logging.getLogger("gpdeim")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


def build_parser():
    p = argparse.ArgumentParser(prog="gpdeim", description="Structure-preserving hyper-reduction of Hamiltonian systems.")
    p.add_argument("verb", choices=("snapshots", "build", "run", "report"))
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--mode", choices=MODES, help="override run.mode")
    p.add_argument("--out", help="override run.out")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--threads", type=int, help="worker threads for parameter sweeps")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {"run": {}}
    for key in ("mode", "out", "seed", "threads"):
        val = getattr(args, key)
        if val is not None:
            overrides["run"][key] = val
    try:
        cfg = load_config(args.config, overrides)
        threads = int(cfg["run"]["threads"])
        if args.verb == "snapshots":
            paths = cmd_snapshots(cfg, threads)
            log.info("wrote %d snapshot files", len(paths))
        elif args.verb == "build":
            res = cmd_build(cfg)
            log.info("built basis and DEIM data for m=%s", res["m_values"])
        elif args.verb == "run":
            rdir = cmd_run(cfg, args.mode, threads)
            log.info("results in %s", rdir)
        else:
            out, n = cmd_report(cfg)
            log.info("merged %d rows into %s", n, out)
    except (RankError, BasisCertificationError, IntegrationError, NewtonError, np.linalg.LinAlgError) as exc:
        print(f"gpdeim: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ArtifactError, ValueError, OSError) as exc:
        print(f"gpdeim: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
