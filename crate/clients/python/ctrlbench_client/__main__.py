import argparse
import sys

from .policy import PDPolicy, load_policy
from .protocol import serve


def main(argv=None):
    p = argparse.ArgumentParser(prog="ctrlbench-client", description="Serve a policy over the ctrlbench bridge.")
    sub = p.add_subparsers(dest="mode", required=True)
    pd = sub.add_parser("pd", help="built-in PD policy")
    pd.add_argument("--kp", type=float, default=6.0)
    pd.add_argument("--kd", type=float, default=4.0)
    pd.add_argument("--tau", type=float, default=0.02, help="derivative filter time constant; 0 for a plain difference")
    pd.add_argument("--reverse", action="store_true", help="negate the command (plants with negative gain)")
    load = sub.add_parser("load", help="policy from module:attr")
    load.add_argument("target")
    load.add_argument("--arg", action="append", default=[], metavar="KEY=VALUE", help="keyword for the factory")
    args = p.parse_args(argv)

    if args.mode == "pd":
        policy = PDPolicy(args.kp, args.kd, args.tau, args.reverse)
    else:
        kwargs = {}
        for item in args.arg:
            key, sep, value = item.partition("=")
            if not sep:
                p.error(f"--arg needs KEY=VALUE, got {item!r}")
            kwargs[key] = value
        policy = load_policy(args.target, **kwargs)
    serve(policy)
    return 0


if __name__ == "__main__":
    sys.exit(main())
