"""``hoproute`` command line.

Data goes to standard output or ``--out``; errors go to standard error as
``code: message``. Exit status: 0 ok, 2 usage, 3 file, 4 domain error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

from . import __version__
from .errors import ConfigError, HopRouteError, SchemaError
from .experiments import (
    UNIFIED,
    ConnectivityMode,
    ConnectivityResult,
    connectivity,
    connectivity_csv,
    cost_table,
    costs_csv,
    decentralization_csv,
    decentralization_curve,
    scalability_csv,
    scalability_point,
    scalability_world,
    stableswap_curve,
    swap_csv,
    synthetic_pools,
    to_csv,
    Pool,
)
from .policy import PolicySet, parse_constraints
from .routing import RoutingObjective, compute_route, disjoint_routes
from .simkernel import SimConfig, run
from .topology import Topology, load_topology, removal_order

EXIT_USAGE = 2
EXIT_FILE = 3
EXIT_DOMAIN = 4

BUILTIN_TOPOLOGIES = {"scale-free-100": "scale_free_100.json", "diamond": "diamond.json"}


class UsageError(Exception):
    code = "UsageError"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


# -- helpers --------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    """``"1,3,5"`` or ``"1-12"`` (inclusive) or a mix of both."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError(f"empty list {text!r}")
    return out


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def _hop_limits(text: str) -> list[int]:
    return [UNIFIED if x.strip() in ("unified", "inf") else int(x) for x in text.split(",") if x.strip()]


class _Inputs:
    """Collects the bytes of every input so the meta line can fingerprint them."""

    def __init__(self) -> None:
        self._h = hashlib.sha256()
        self.used = False

    def add(self, label: str, data: bytes) -> None:
        self._h.update(label.encode() + b"\0" + data + b"\0")
        self.used = True

    @property
    def digest(self) -> str:
        return "sha256:" + self._h.hexdigest() if self.used else "none"


def _read(path: str, inputs: _Inputs) -> bytes:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"{path}: {exc.strerror or exc}") from None
    inputs.add(Path(path).name, data)
    return data


def builtin_topology(name: str) -> Topology:
    """Load one of the topologies shipped with the package."""
    data = resources.files("hoproute").joinpath("data", BUILTIN_TOPOLOGIES[name]).read_bytes()
    return load_topology(json.loads(data))


def _topology(source: str | None, inputs: _Inputs, default: str = "scale-free-100") -> Topology:
    name = source or default
    if name in BUILTIN_TOPOLOGIES and not Path(name).exists():
        data = resources.files("hoproute").joinpath("data", BUILTIN_TOPOLOGIES[name]).read_bytes()
        inputs.add(f"builtin:{name}", data)
    else:
        data = _read(name, inputs)
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{name}: not valid JSON ({exc})") from None
    return load_topology(doc)


def _meta(args: argparse.Namespace, inputs: _Inputs, extra: str = "") -> str:
    meta = f"version={__version__} seed={args.seed} input={inputs.digest} command={args.command_name}"
    return f"{meta} {extra}" if extra else meta


def _emit(args: argparse.Namespace, text: str) -> None:
    if args.out:
        try:
            Path(args.out).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise FileNotFoundError(f"{args.out}: {exc.strerror or exc}") from None
    else:
        sys.stdout.write(text)


def _policy(text: str | None) -> PolicySet:
    if not text:
        return PolicySet()
    return PolicySet(security=parse_constraints(text))


# -- commands ---------------------------------------------------------------


def cmd_topo_validate(args: argparse.Namespace) -> None:
    inputs = _Inputs()
    t = _topology(args.path, inputs)
    rows = [(c, t.chains[c].n_validators, t.chains[c].nakamoto, t.degree(c)) for c in t.chain_ids]
    _emit(args, to_csv(["chain_id", "validators", "nakamoto", "degree"], rows, _meta(args, inputs)))


def cmd_route(args: argparse.Namespace) -> None:
    inputs = _Inputs()
    t = _topology(args.topology, inputs, default="diamond")
    ps = _policy(args.policy)
    obj = RoutingObjective(args.objective)
    if args.disjoint > 1:
        routes = disjoint_routes(t, args.src, args.dst, ps, args.disjoint, args.max_hops, obj)
    else:
        routes = [compute_route(t, args.src, args.dst, ps, obj, args.max_hops)]
    rows = [
        (",".join(r.hops), ",".join(c or "" for c in r.channels), r.fee_estimate, r.latency_estimate)
        for r in routes
    ]
    _emit(args, to_csv(["hops", "channels", "fee", "latency_ms"], rows, _meta(args, inputs)))


def cmd_exp_connectivity(args: argparse.Namespace) -> None:
    inputs = _Inputs()
    t = _topology(args.topology, inputs)
    hub = args.hub or removal_order(t)[0]
    modes = [ConnectivityMode(m) for m in args.mode.split(",")] if args.mode != "all" else list(ConnectivityMode)
    results: list[ConnectivityResult] = []
    for nc in args.nc:
        for m in modes:
            results.append(connectivity(t, m, nc, args.hops, hub=hub))
    _emit(args, connectivity_csv(results, _meta(args, inputs)))


def cmd_exp_decentralization(args: argparse.Namespace) -> None:
    inputs = _Inputs()
    t = _topology(args.topology, inputs)
    flags = {"both": [False, True], "true": [True], "false": [False]}[args.upgraded]
    rows = []
    for up in flags:
        for h in args.hops:
            for k, c in decentralization_curve(t, h, args.k_max, up, args.seed, args.nc):
                rows.append((k, h, up, c))
    _emit(args, decentralization_csv(rows, _meta(args, inputs)))


def cmd_exp_scalability(args: argparse.Namespace) -> None:
    inputs = _Inputs()
    if args.topology:
        if not args.hub:
            raise UsageError("--hub is required with --topology")
        t, hub, overrides = _topology(args.topology, inputs), args.hub, {}
    else:
        t, hub, overrides = scalability_world(
            n_endpoints=args.endpoints, capacity=args.capacity,
            endpoint_capacity_factor=args.endpoint_capacity_factor,
        )
    points = []
    for mode in args.mode.split(","):
        for rate in args.rates:
            points.append(scalability_point(t, mode, rate, args.duration * 1000.0, hub, args.seed, overrides,
                                            max_packets=args.max_packets))
    _emit(args, scalability_csv(points, _meta(args, inputs)))


def cmd_exp_costs(args: argparse.Namespace) -> None:
    inputs = _Inputs()
    rows = cost_table(args.hops, args.validators, args.amortize, base_gas=args.base_gas)
    _emit(args, costs_csv(rows, _meta(args, inputs)))


def cmd_exp_swap(args: argparse.Namespace) -> None:
    inputs = _Inputs()
    t = _topology(args.topology, inputs)
    local = args.local or removal_order(t)[0]
    if args.pools:
        doc = json.loads(_read(args.pools, inputs))
        pools = [Pool(p["chain_id"], float(p["reserve_x"]), float(p["reserve_y"])) for p in doc]
    else:
        pools = synthetic_pools(t, local, args.liquidity, args.local_share, args.seed)
    rows = stableswap_curve(t, pools, local, args.hop_limits, args.trades, _policy(args.policy))
    _emit(args, swap_csv(rows, _meta(args, inputs, "arithmetic=float64 pools=synthetic" if not args.pools else "arithmetic=float64")))


def cmd_sim_run(args: argparse.Namespace) -> None:
    inputs = _Inputs()
    doc = json.loads(_read(args.config, inputs))
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    doc.setdefault("seed", args.seed)
    args.seed = doc["seed"]
    world = doc.pop("world", None)
    overrides: dict = {}
    if args.topology:
        t = _topology(args.topology, inputs)
    elif world == "scalability":
        t, hub, overrides = scalability_world()
        doc.setdefault("hub", hub)
    else:
        raise UsageError("give --topology or set \"world\": \"scalability\" in the config")
    doc["chain_overrides"] = {**overrides, **doc.get("chain_overrides", {})}
    res = run(SimConfig.from_dict(doc), t)
    meta = f"# meta: {_meta(args, inputs)}\n"
    _emit(args, meta + res.traces_csv())
    if args.events:
        Path(args.events).write_text(meta + res.events_csv(), encoding="utf-8")


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", help="write CSV here instead of standard output")
    common.add_argument("--seed", type=int, default=0)

    p = _Parser(prog="hoproute", description="Policy-constrained multi-hop routing toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="group", required=True)

    topo = sub.add_parser("topo", help="topology documents").add_subparsers(dest="action", required=True)
    v = topo.add_parser("validate", parents=[common], help="validate a topology and report per-chain metrics")
    v.add_argument("path")
    v.set_defaults(func=cmd_topo_validate, command_name="topo validate")

    r = sub.add_parser("route", parents=[common], help="compute a policy-compliant route")
    r.add_argument("--topology", help="topology JSON (default: bundled diamond)")
    r.add_argument("--src", required=True)
    r.add_argument("--dst", required=True)
    r.add_argument("--policy", default="", help='e.g. "nakamoto:8,validators:20"')
    r.add_argument("--objective", default="min-hops", choices=[o.value for o in RoutingObjective])
    r.add_argument("--max-hops", type=int, default=4)
    r.add_argument("--disjoint", type=int, default=1, help="number of intermediate-disjoint routes")
    r.set_defaults(func=cmd_route, command_name="route")

    exp = sub.add_parser("exp", help="experiments").add_subparsers(dest="action", required=True)

    c = exp.add_parser("connectivity", parents=[common])
    c.add_argument("--topology", help="topology JSON (default: bundled scale-free-100)")
    c.add_argument("--nc", type=_int_list, default=_int_list("1-12"))
    c.add_argument("--hops", type=int, default=3)
    c.add_argument("--mode", default="all", help="all or a comma list of direct,hub,multihop")
    c.add_argument("--hub", help="hub chain (default: highest degree)")
    c.set_defaults(func=cmd_exp_connectivity, command_name="exp connectivity")

    d = exp.add_parser("decentralization", parents=[common])
    d.add_argument("--topology")
    d.add_argument("--k-max", type=int, default=5)
    d.add_argument("--hops", type=_int_list, default=[2, 3])
    d.add_argument("--upgraded", choices=["both", "true", "false"], default="both")
    d.add_argument("--nc", type=int, default=8)
    d.set_defaults(func=cmd_exp_decentralization, command_name="exp decentralization")

    s = exp.add_parser("scalability", parents=[common])
    s.add_argument("--rates", type=_float_list, default=[20.0, 300.0, 1600.0], help="packets per second")
    s.add_argument("--duration", type=float, default=60.0, help="sim-time seconds")
    s.add_argument("--mode", default="hub,multihop")
    s.add_argument("--topology")
    s.add_argument("--hub")
    s.add_argument("--endpoints", type=int, default=41)
    s.add_argument("--capacity", type=int, default=200, help="transactions per block on shared chains")
    s.add_argument("--endpoint-capacity-factor", type=int, default=10)
    s.add_argument("--max-packets", type=int)
    s.set_defaults(func=cmd_exp_scalability, command_name="exp scalability")

    k = exp.add_parser("costs", parents=[common])
    k.add_argument("--hops", type=int, default=3, help="largest hop count")
    k.add_argument("--validators", type=int, default=54)
    k.add_argument("--amortize", type=_int_list, default=[1, 10])
    k.add_argument("--base-gas", type=int, default=150_000)
    k.set_defaults(func=cmd_exp_costs, command_name="exp costs")

    w = exp.add_parser("swap", parents=[common])
    w.add_argument("--topology")
    w.add_argument("--pools", help="JSON list of {chain_id, reserve_x, reserve_y}")
    w.add_argument("--local", help="local chain (default: highest degree)")
    w.add_argument("--trades", type=_float_list, default=[1e6, 1e7, 5e7, 1e8, 5e8, 1e9])
    w.add_argument("--hop-limits", type=_hop_limits, default=[0, 1, 2, 3, UNIFIED])
    w.add_argument("--policy", default="")
    w.add_argument("--liquidity", type=float, default=10_000_000_000.0)
    w.add_argument("--local-share", type=float, default=0.25)
    w.set_defaults(func=cmd_exp_swap, command_name="exp swap")

    sim = sub.add_parser("sim", help="simulation").add_subparsers(dest="action", required=True)
    sr = sim.add_parser("run", parents=[common])
    sr.add_argument("--config", required=True, help="JSON object of simulation settings")
    sr.add_argument("--topology")
    sr.add_argument("--events", help="also write the event log CSV here")
    sr.set_defaults(func=cmd_sim_run, command_name="sim run")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"FileError: {exc}", file=sys.stderr)
        return EXIT_FILE
    except HopRouteError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (ValueError, TypeError) as exc:
        print(f"ValueError: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
