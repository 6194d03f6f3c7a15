"""Operator command line.

The CLI embeds the simulator: each invocation loads every node of the state
directory, performs one operation as ``--node`` and runs the network until it
is quiet. Exit codes: 0 success, 1 refused by the ledger or a holder (the
reason code is printed on stderr), 2 usage error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import click

from . import ml, plans
from .chaincode import leaderboard
from .errors import AssetDenied, FedLedgerError, MLError, PlanError, Rejection, SchemaError, UnknownAsset
from .hashing import canonical_json
from .network import CONFIG_FILE, Envelope, Network
from .scenario import run_scenario

ENV_STATE_DIR = "FEDLEDGER_STATE_DIR"

LIST_KINDS = {
    "objective": "objectives",
    "dataset": "datasets",
    "algo": "algorithms",
    "sample": "samples",
    "traintuple": "traintuples",
    "testtuple": "testtuples",
}


class Refused(click.ClickException):
    exit_code = 1

    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(detail)
        self.reason = reason

    def show(self, file=None) -> None:
        file = file or sys.stderr
        click.echo(f"{self.reason}: {self.message}" if self.message else self.reason, err=True)


class Ctx:
    def __init__(self, state_dir: Path, node: Optional[str], fmt: str) -> None:
        self.state_dir = state_dir
        self.node_id = node
        self.fmt = fmt
        self._net: Optional[Network] = None

    @property
    def net(self) -> Network:
        if self._net is None:
            if not (self.state_dir / CONFIG_FILE).exists():
                raise click.UsageError(f"{self.state_dir} is not initialized; run 'init' first")
            self._net = Network.load(self.state_dir)
            if self.node_id is not None and self.node_id not in self._net.node_ids:
                raise click.UsageError(f"node {self.node_id!r} is not one of {self._net.node_ids}")
        return self._net

    @property
    def node(self):
        if self.node_id is None:
            raise click.UsageError("this command needs --node")
        return self.net.node(self.node_id)

    def submit(self, txs) -> Envelope:
        env = self.net.submit(self.node.id, txs)
        self.net.settle(env)
        if env.status == "rejected":
            raise Refused(env.rejection.reason.value, env.rejection.detail)
        self.net.run_until_idle()
        return env


pass_ctx = click.make_pass_decorator(Ctx)


def _nodes(value: Optional[str]) -> Optional[list[str]]:
    if value is None:
        return None
    return [v for v in (s.strip() for s in value.split(",")) if v]


def _perms(process: Optional[str], download: Optional[str], objectives: Optional[str] = None) -> Optional[dict]:
    if process is None and download is None and objectives is None:
        return None
    d: dict[str, Any] = {}
    if process is not None:
        d["process"] = _nodes(process)
    if download is not None:
        d["download"] = _nodes(download)
    if objectives is not None:
        d["objectives"] = _nodes(objectives)
    return d


def _emit(ctx: Ctx, payload: Any, rows: Optional[list[dict]] = None, columns: Sequence[str] = ()) -> None:
    if ctx.fmt == "json":
        click.echo(canonical_json(payload).decode())
        return
    if rows is None:
        for k, v in payload.items() if isinstance(payload, dict) else []:
            click.echo(f"{k}: {v}")
        return
    cols = list(columns) or (sorted(rows[0]) if rows else [])
    cells = [[_cell(r.get(c)) for c in cols] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(cols)]
    click.echo("  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip())
    for row in cells:
        click.echo("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())


def _cell(v: Any) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return ",".join(_cell(x) for x in v)
    if isinstance(v, dict):
        return json.dumps(v, sort_keys=True)
    s = str(v)
    return s[:12] if len(s) == 64 else s


def _created(ctx: Ctx, env: Envelope, what: str) -> None:
    keys = [tx.tx_id for tx in env.txs]
    _emit(ctx, {"keys": keys, "height": env.height, "kind": what} if len(keys) > 1 else {"key": keys[0], "height": env.height, "kind": what})


@click.group()
@click.option(
    "--state-dir",
    type=click.Path(file_okay=False, path_type=Path),
    envvar=ENV_STATE_DIR,
    default=Path(".fedledger"),
    show_default=True,
    help=f"Network state directory (env {ENV_STATE_DIR}).",
)
@click.option("--node", "node", default=None, help="Act as this node.")
@click.option("--format", "fmt", type=click.Choice(["table", "json"]), default="table", show_default=True)
@click.version_option(package_name="artifact", prog_name="fedledger")
@click.pass_context
def main(cctx: click.Context, state_dir: Path, node: Optional[str], fmt: str) -> None:
    """Federated learning orchestration over a permissioned ledger."""
    cctx.obj = Ctx(state_dir, node, fmt)


@main.command()
@click.option("--nodes", required=True, help="Comma-separated node ids.")
@click.option("--orderer", default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--max-delay", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--fetch-timeout", type=click.IntRange(min=0), default=3, show_default=True)
@pass_ctx
def init(ctx: Ctx, nodes: str, orderer, seed, max_delay, fetch_timeout) -> None:
    """Create an empty network in the state directory."""
    if (ctx.state_dir / CONFIG_FILE).exists():
        raise click.UsageError(f"{ctx.state_dir} already holds a network")
    try:
        net = Network(_nodes(nodes), orderer, seed=seed, max_delay=max_delay, fetch_timeout=fetch_timeout, state_dir=ctx.state_dir)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    _emit(ctx, net.config())


# ---------------------------------------------------------------- assets


@main.group()
def asset() -> None:
    """Register and list assets."""


@asset.group("add")
def asset_add() -> None:
    """Register an objective, dataset or algorithm."""


def _perm_options(f):
    f = click.option("--download", default=None, help="Comma-separated nodes with download right.")(f)
    f = click.option("--process", default=None, help="Comma-separated nodes with process right.")(f)
    return f


@asset_add.command("objective")
@click.option("--name", required=True)
@click.option("--metric", type=click.Choice(["accuracy", "mse"]), required=True)
@click.option("--test-dataset", default=None)
@click.option("--test-samples", default="", help="Comma-separated test sample keys.")
@_perm_options
@pass_ctx
def add_objective(ctx: Ctx, name, metric, test_dataset, test_samples, process, download) -> None:
    samples = _nodes(test_samples) or []
    if samples and not test_dataset:
        raise click.UsageError("--test-samples needs --test-dataset")
    tx = ctx.node.register_objective(name, metric, [(s, test_dataset) for s in samples], _perms(process, download))
    _created(ctx, ctx.submit(tx), "objective")


@asset_add.command("dataset")
@click.option("--name", required=True)
@click.option("--features", required=True, help="Comma-separated feature columns.")
@click.option("--label", required=True, help="Label column.")
@click.option("--delimiter", default=",", show_default=True)
@click.option("--objective", default=None)
@_perm_options
@pass_ctx
def add_dataset(ctx: Ctx, name, features, label, delimiter, objective, process, download) -> None:
    try:
        opener = ml.OpenerDescriptor(tuple(_nodes(features)), label, delimiter=delimiter)
    except (ValueError, SchemaError) as exc:
        raise click.UsageError(str(exc)) from None
    tx = ctx.node.register_dataset(name, opener, _perms(process, download), objective)
    _created(ctx, ctx.submit(tx), "dataset")


@asset_add.command("algo")
@click.option("--name", required=True)
@click.option("--spec", "spec_json", default=None, help="Algorithm spec as JSON.")
@click.option("--spec-file", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@_perm_options
@pass_ctx
def add_algo(ctx: Ctx, name, spec_json, spec_file, process, download) -> None:
    if (spec_json is None) == (spec_file is None):
        raise click.UsageError("give exactly one of --spec and --spec-file")
    try:
        raw = json.loads(spec_json if spec_json is not None else spec_file.read_text())
        spec = ml.spec_from_dict(raw)
    except (ValueError, TypeError, KeyError, MLError) as exc:
        raise click.UsageError(f"bad algorithm spec: {exc}") from None
    tx = ctx.node.register_algorithm(name, spec, _perms(process, download))
    _created(ctx, ctx.submit(tx), "algorithm")


@asset.command("list")
@click.argument("kind", type=click.Choice(sorted(LIST_KINDS)))
@click.option("--filter", "filters", multiple=True, help="key=value; repeatable.")
@pass_ctx
def asset_list(ctx: Ctx, kind: str, filters) -> None:
    """List assets of one kind from the ledger state."""
    wanted = []
    for f in filters:
        k, sep, v = f.partition("=")
        if not sep:
            raise click.UsageError(f"--filter expects key=value, got {f!r}")
        wanted.append((k, v))
    node = ctx.net.nodes[ctx.node_id or ctx.net.orderer]
    rows = []
    for key, rec in sorted(node.state.collection(LIST_KINDS[kind]).items()):
        d = rec.to_dict()
        if all(_matches(d.get(k), v) for k, v in wanted):
            rows.append(d)
    columns = {
        "objective": ("key", "name", "owner", "metric"),
        "dataset": ("key", "name", "owner", "data_type"),
        "algo": ("key", "name", "owner", "kind"),
        "sample": ("key", "dataset_keys", "owner", "test_only"),
        "traintuple": ("key", "kind", "worker", "rank", "status", "performance", "tag"),
        "testtuple": ("key", "traintuple_key", "worker", "certified", "status", "performance"),
    }[kind]
    _emit(ctx, rows, rows, columns)


def _matches(value: Any, wanted: str) -> bool:
    if isinstance(value, (list, tuple)):
        return wanted in [str(v) for v in value]
    if isinstance(value, dict):
        return wanted in json.dumps(value, sort_keys=True)
    if isinstance(value, bool):
        return wanted.lower() == str(value).lower()
    return value is not None and (str(value) == wanted or (len(str(value)) == 64 and str(value).startswith(wanted)))


@main.group()
def data() -> None:
    """Private data samples."""


@data.command("add")
@click.option("--dataset", required=True)
@click.option("--test-only", is_flag=True, help="Sanctuarize the samples for evaluation.")
@click.argument("files", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@pass_ctx
def data_add(ctx: Ctx, dataset, test_only, files) -> None:
    """Keep FILES on this node and register their digests on the ledger."""
    tx = ctx.node.register_local_data([p.read_bytes() for p in files], dataset, test_only)
    if tx is None:
        _emit(ctx, {"samples": [], "note": "already registered"})
        return
    ctx.submit(tx)
    _emit(ctx, {"samples": [s["key"] for s in tx.payload["samples"]], "dataset": dataset})


@main.group()
def perm() -> None:
    """Permission regimes."""


@perm.command("set")
@click.argument("asset_key")
@_perm_options
@click.option("--objectives", default=None, help="Comma-separated objective whitelist.")
@pass_ctx
def perm_set(ctx: Ctx, asset_key, process, download, objectives) -> None:
    """Replace the regime of an asset (or of a traintuple's output model)."""
    perms = _perms(process, download, objectives)
    if perms is None:
        raise click.UsageError("nothing to change")
    ctx.submit(ctx.node.update_permissions(asset_key, perms))
    _emit(ctx, {"asset": asset_key, "permissions": perms})


# ---------------------------------------------------------------- computations


@main.group("tuple")
def tuple_() -> None:
    """Training and evaluation tasks."""


@tuple_.command("train")
@click.option("--algo", "algorithm", required=True)
@click.option("--objective", required=True)
@click.option("--dataset", default=None)
@click.option("--samples", default="", help="Comma-separated sample keys.")
@click.option("--inputs", default="", help="Comma-separated input traintuple keys.")
@click.option("--tag", default=None)
@_perm_options
@pass_ctx
def tuple_train(ctx: Ctx, algorithm, objective, dataset, samples, inputs, tag, process, download) -> None:
    tx = ctx.node.create_traintuple(
        algorithm, objective, dataset, _nodes(samples) or [], _nodes(inputs) or [], _perms(process, download), tag
    )
    _created(ctx, ctx.submit(tx), "traintuple")


@tuple_.command("test")
@click.option("--traintuple", required=True)
@click.option("--objective", required=True)
@click.option("--dataset", default=None)
@click.option("--samples", default="", help="Comma-separated sample keys; omit for certified evaluation.")
@click.option("--tag", default=None)
@pass_ctx
def tuple_test(ctx: Ctx, traintuple, objective, dataset, samples, tag) -> None:
    tx = ctx.node.create_testtuple(traintuple, objective, dataset, _nodes(samples) or [], tag)
    _created(ctx, ctx.submit(tx), "testtuple")


@main.group()
def plan() -> None:
    """Compute plans."""


@plan.command("submit")
@click.argument("plan_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@pass_ctx
def plan_submit(ctx: Ctx, plan_file: Path) -> None:
    """Submit a plan file atomically; prints the key of every step."""
    try:
        p = plans.load_plan(plan_file)
        resolved = plans.resolve(p, ctx.node.id, ctx.node.state)
    except (PlanError, UnknownAsset) as exc:
        raise click.UsageError(f"{type(exc).__name__}: {exc}") from None
    ctx.submit(resolved.txs)
    rows = [{"ref": ref, "key": key} for ref, key in resolved.keys.items()]
    _emit(ctx, {"tag": p.tag, "keys": dict(resolved.keys)}, rows, ("ref", "key"))


@main.command("leaderboard")
@click.argument("objective_key")
@pass_ctx
def leaderboard_cmd(ctx: Ctx, objective_key: str) -> None:
    """Certified evaluations of an objective, best first."""
    state = ctx.net.nodes[ctx.node_id or ctx.net.orderer].state
    if objective_key not in state.objectives:
        raise Refused("UnknownAsset", f"objective {objective_key}")
    rows = []
    for rank, (tt_key, perf) in enumerate(leaderboard(state, objective_key), start=1):
        tt = state.traintuples[tt_key]
        rows.append({"rank": rank, "traintuple": tt_key, "performance": perf, "worker": tt.worker, "tag": tt.tag})
    metric = state.objectives[objective_key].metric.kind
    if ctx.fmt == "json":
        _emit(ctx, {"objective": objective_key, "metric": metric, "rows": rows})
    else:
        _emit(ctx, rows, rows, ("rank", "traintuple", "performance", "worker", "tag"))


@main.command()
@click.argument("model")
@click.option("--features", required=True, help="Comma-separated feature values.")
@pass_ctx
def predict(ctx: Ctx, model: str, features: str) -> None:
    """Predict on this node with MODEL (a traintuple key or model hash)."""
    try:
        x = [float(v) for v in features.split(",")]
    except ValueError:
        raise click.UsageError("--features must be numbers") from None
    node = ctx.node
    tt = node.state.traintuples.get(model)
    model_hash = tt.out_model if tt is not None else model
    if model_hash is None:
        raise Refused("UnknownAsset", f"traintuple {model} has no model yet")
    y = node.serve_prediction(model_hash, x)
    _emit(ctx, {"model": model_hash, "prediction": [float(v) for v in y.ravel()]})


@main.group()
def sim() -> None:
    """Scenario simulation."""


@sim.command("run")
@click.argument("scenario_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--trace-out", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Write the message trace (JSONL).")
@click.option("--persist", is_flag=True, help="Keep the resulting ledgers in --state-dir.")
@pass_ctx
def sim_run(ctx: Ctx, scenario_file: Path, trace_out, persist) -> None:
    """Run a scenario file and report the resulting ledger."""
    if persist and (ctx.state_dir / CONFIG_FILE).exists():
        raise click.UsageError(f"{ctx.state_dir} already holds a network")
    try:
        result = run_scenario(scenario_file, state_dir=ctx.state_dir if persist else None)
    except json.JSONDecodeError as exc:
        raise click.UsageError(f"{scenario_file}: {exc}") from None
    net = result.network
    if trace_out is not None:
        net.export_trace(trace_out)
    orderer = net.nodes[net.orderer]
    summary = {
        "ticks": net.tick,
        "height": len(orderer.chain),
        "messages": len(net.trace),
        "trace_digest": net.trace.digest(),
        "state_digests": net.state_digests(),
        "events": [{"op": o.op, "ok": o.ok, "reason": o.reason} for o in result.outcomes],
        "leaderboards": {k: [[t, p] for t, p in v] for k, v in result.leaderboards().items()},
    }
    if ctx.fmt == "json":
        _emit(ctx, summary)
    else:
        for k in ("ticks", "height", "messages", "trace_digest"):
            click.echo(f"{k}: {summary[k]}")
        for n, d in summary["state_digests"].items():
            click.echo(f"state {n}: {d}")
        failed = [e for e in summary["events"] if not e["ok"]]
        click.echo(f"events: {len(summary['events'])} ({len(failed)} refused)")


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point that maps library errors onto the exit-code contract."""
    try:
        main.main(args=list(argv) if argv is not None else None, prog_name="fedledger", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except Rejection as exc:
        click.echo(f"{exc.reason.value}: {exc.detail}", err=True)
        return 1
    except AssetDenied as exc:
        click.echo(str(exc), err=True)
        return 1
    except UnknownAsset as exc:
        click.echo(f"UnknownAsset: {exc}", err=True)
        return 1
    except (FedLedgerError, KeyError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


def entry() -> None:
    sys.exit(run())


if __name__ == "__main__":
    entry()
