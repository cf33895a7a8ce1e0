"""Command line: run the server, drive load, and manage devices over the admin API."""

from __future__ import annotations

import asyncio
import base64
import json
import logging
import signal
import sys
import threading

import click

from .admin import AdminClient
from .config import load_config

ADMIN_URL = "http://127.0.0.1:8080"


def _hex_type(size, what):
    class Hex(click.ParamType):
        name = what

        def convert(self, value, param, ctx):
            try:
                raw = bytes.fromhex(value)
            except (ValueError, TypeError):
                raw = b""
            if len(raw) != size:
                self.fail("%r is not a %d-byte hex %s" % (value, size, what), param, ctx)
            return raw.hex()

    return Hex()


EUI = _hex_type(8, "EUI")
KEY = _hex_type(16, "key")
DEV_ADDR = _hex_type(4, "DevAddr")


def _emit(doc):
    click.echo(json.dumps(doc, indent=2, sort_keys=True))


def _call(result, ok=(200, 201, 202)):
    status, doc = result
    if status not in ok:
        err = doc.get("error") if isinstance(doc, dict) else doc
        raise click.ClickException("HTTP %d: %s" % (status, err))
    return doc


def _host_port(text):
    host, _, port = text.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise click.BadParameter("expected host:port, got %r" % text) from None


@click.group()
@click.option("--admin-url", envvar="LORANS_ADMIN_URL", default=ADMIN_URL, show_default=True,
              help="Base URL of the admin API.")
@click.option("--token", envvar="LORANS_TOKEN", default=None, help="Admin bearer token.")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, admin_url, token, verbose):
    """LoRaWAN network server tools."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    ctx.obj = dict(admin_url=admin_url, token=token)


def _client(ctx):
    return AdminClient(ctx.obj["admin_url"], ctx.obj["token"])


# server


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML or JSON file.")
@click.option("--host", default=None, help="UDP bind address.")
@click.option("--port", type=int, default=None, help="UDP port (0 picks a free one).")
@click.option("--admin-host", default=None)
@click.option("--admin-port", type=int, default=None)
@click.option("--no-admin", is_flag=True, help="Do not start the admin API.")
@click.option("--instances", type=click.IntRange(1), default=None, help="Central server instances.")
@click.option("--work-ms", type=click.FloatRange(0), default=None, help="Emulated per-uplink central work.")
@click.option("--fixtures", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--registry", default=None, help="sqlite path for the registry.")
@click.pass_context
def serve(ctx, config_path, host, port, admin_host, admin_port, no_admin, instances, work_ms, fixtures, registry):
    """Run the network server until interrupted.

    Prints one JSON line with the bound ports once ready.
    """
    from .server import NetworkServer

    cfg = load_config(config_path)
    for obj, name, value in ((cfg.connector, "host", host), (cfg.connector, "port", port),
                             (cfg.admin, "host", admin_host), (cfg.admin, "port", admin_port),
                             (cfg.central, "instances", instances), (cfg.central, "work_ms", work_ms),
                             (cfg, "fixtures", fixtures), (cfg, "registry_path", registry),
                             (cfg.admin, "token", ctx.obj["token"])):
        if value is not None:
            setattr(obj, name, value)
    if no_admin:
        cfg.admin.enabled = False
    server = NetworkServer(cfg).start()
    ready = dict(udp_port=server.connector.port, admin_url=server.admin.url if server.admin else None)
    click.echo(json.dumps(ready), nl=True)
    sys.stdout.flush()
    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    done.wait()
    server.stop()


# load


@main.command()
@click.option("--server", "server_addr", default="127.0.0.1:1700", show_default=True, help="UDP host:port.")
@click.option("--nodes", type=click.IntRange(0), default=10, show_default=True)
@click.option("--gateways", type=click.IntRange(1), default=1, show_default=True)
@click.option("--fan-in", type=click.IntRange(1), default=1, show_default=True, help="Gateways hearing each node.")
@click.option("--period", type=click.FloatRange(min=0, min_open=True), default=40.0, show_default=True)
@click.option("--timeout", type=click.FloatRange(min=0, min_open=True), default=5.0, show_default=True)
@click.option("--duration", type=click.FloatRange(min=0, min_open=True), default=60.0, show_default=True)
@click.option("--warmup", type=click.FloatRange(0), default=0.0, show_default=True)
@click.option("--confirmed/--unconfirmed", default=True, show_default=True)
@click.option("--otaa", is_flag=True, help="Join over the air instead of registering ABP sessions.")
@click.option("--adr", is_flag=True)
@click.option("--demod-limit", type=click.IntRange(0), default=8, show_default=True, help="0 disables it.")
@click.option("--seed", type=int, default=0)
@click.option("--no-register", is_flag=True, help="Assume devices are already provisioned.")
@click.option("--report", type=click.Path(dir_okay=False, writable=True), default=None, help="NDJSON output.")
@click.pass_context
def simulate(ctx, server_addr, nodes, gateways, fan_in, period, timeout, duration, warmup, confirmed, otaa, adr,
             demod_limit, seed, no_register, report):
    """Drive a virtual fleet against a running server and print the summary."""
    from .sim.loadgen import RegistrationFailed, ScenarioConfig, ServerUnreachable, run_scenario

    cfg = ScenarioConfig(nodes=nodes, gateways=gateways, fan_in=fan_in, period=period, timeout=timeout,
                         duration=duration, warmup=warmup, confirmed=confirmed, otaa=otaa, adr=adr,
                         demod_limit=demod_limit or None, seed=seed, server=_host_port(server_addr),
                         admin_url=ctx.obj["admin_url"], admin_token=ctx.obj["token"], register=not no_register,
                         report=report)
    try:
        result = asyncio.run(run_scenario(cfg))
    except (ServerUnreachable, RegistrationFailed) as exc:
        raise click.ClickException(str(exc)) from None
    _emit(result.to_dict())


@main.command()
@click.option("--points", default=None, help="Comma-separated fleet sizes; defaults depend on --instances.")
@click.option("--instances", type=click.IntRange(1), default=1, show_default=True)
@click.option("--work-ms", type=click.FloatRange(0), default=80.0, show_default=True)
@click.option("--warmup", type=float, default=15.0, show_default=True)
@click.option("--window", type=float, default=20.0, show_default=True)
@click.option("--seed", type=int, default=1)
@click.option("--out", type=click.Path(dir_okay=False, writable=True), default=None, help="JSON output.")
def sweep(points, instances, work_ms, warmup, window, seed, out):
    """Measure throughput against fleet size, one fresh server per point, and fit the knee."""
    from .sim.sweep import K1_POINTS, K2_POINTS, SweepSettings, knee_of, run_sweep, sweep_summary

    if points:
        try:
            sizes = [int(p) for p in points.split(",") if p.strip()]
        except ValueError:
            raise click.BadParameter("points must be integers", param_hint="--points") from None
    else:
        sizes = list(K1_POINTS if instances == 1 else K2_POINTS)
    settings = SweepSettings(work_ms=work_ms, warmup=warmup, window=window, seed=seed)

    def progress(k, r, took):
        median = "inf" if r.median_response_ms in (None, float("inf")) else "%.0f" % r.median_response_ms
        click.echo("k=%d nodes=%5d offered=%6.2f/s throughput=%6.2f/s median=%sms failures=%d (%.0fs)"
                   % (k, r.nodes, r.offered_rate, r.achieved_throughput, median, r.failure_count, took), err=True)

    reports = run_sweep(sizes, instances, settings, progress)
    fit = knee_of(reports)
    click.echo("knee=%.0f nodes plateau=%.2f/s r2=%.4f flat_deviation=%.3f"
               % (fit.knee, fit.plateau, fit.r2, fit.flat_deviation), err=True)
    summary = sweep_summary({instances: reports})
    if out:
        with open(out, "w") as fh:
            json.dump(summary, fh, indent=2)
    _emit(summary[str(instances)]["fit"])


# admin


@main.group()
def device():
    """Provision devices."""


@device.command("add")
@click.argument("dev_eui", type=EUI)
@click.option("--app-eui", type=EUI, default="0000000000000000")
@click.option("--app-key", type=KEY, default=None, help="Makes the device OTAA.")
@click.option("--dev-addr", type=DEV_ADDR, default=None, help="With the session keys, makes it ABP.")
@click.option("--nwk-skey", type=KEY, default=None)
@click.option("--app-skey", type=KEY, default=None)
@click.option("--description", default="")
@click.pass_context
def device_add(ctx, dev_eui, app_eui, app_key, dev_addr, nwk_skey, app_skey, description):
    doc = dict(dev_eui=dev_eui, app_eui=app_eui, description=description)
    if app_key:
        doc.update(activation="OTAA", app_key=app_key)
    else:
        doc.update(activation="ABP", dev_addr=dev_addr, nwk_skey=nwk_skey, app_skey=app_skey)
    _emit(_call(_client(ctx).add_device(**doc)))


@device.command("rm")
@click.argument("dev_eui", type=EUI)
@click.pass_context
def device_rm(ctx, dev_eui):
    _emit(_call(_client(ctx).delete_device(dev_eui)))


@device.command("ls")
@click.pass_context
def device_ls(ctx):
    _emit(_call(_client(ctx).devices()))


@device.command("session")
@click.argument("dev_eui", type=EUI)
@click.pass_context
def device_session(ctx, dev_eui):
    _emit(_call(_client(ctx).session(dev_eui)))


@device.command("frames")
@click.argument("dev_eui", type=EUI)
@click.option("--limit", type=click.IntRange(0), default=50)
@click.pass_context
def device_frames(ctx, dev_eui, limit):
    _emit(_call(_client(ctx).frames(dev_eui, limit)))


@main.group()
def gateway():
    """Provision gateways."""


@gateway.command("add")
@click.argument("gateway_eui", type=EUI)
@click.option("--description", default="")
@click.pass_context
def gateway_add(ctx, gateway_eui, description):
    _emit(_call(_client(ctx).add_gateway(gateway_eui=gateway_eui, description=description)))


@gateway.command("rm")
@click.argument("gateway_eui", type=EUI)
@click.pass_context
def gateway_rm(ctx, gateway_eui):
    _emit(_call(_client(ctx).delete_gateway(gateway_eui)))


@gateway.command("ls")
@click.pass_context
def gateway_ls(ctx):
    _emit(_call(_client(ctx).gateways()))


@main.command()
@click.argument("dev_eui", type=EUI)
@click.option("--fport", type=click.IntRange(1, 223), required=True)
@click.option("--hex", "payload_hex", default=None, help="Payload as hex.")
@click.option("--b64", "payload_b64", default=None, help="Payload as base64.")
@click.option("--confirmed", is_flag=True)
@click.pass_context
def downlink(ctx, dev_eui, fport, payload_hex, payload_b64, confirmed):
    """Queue an application downlink for the device's next uplink."""
    if (payload_hex is None) == (payload_b64 is None):
        raise click.UsageError("give exactly one of --hex and --b64")
    try:
        payload = bytes.fromhex(payload_hex) if payload_hex is not None else base64.b64decode(payload_b64,
                                                                                              validate=True)
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="payload") from None
    _emit(_call(_client(ctx).downlink(dev_eui, fport, payload, confirmed)))


@main.command()
@click.pass_context
def stats(ctx):
    """Per-module counters and worker load."""
    _emit(_call(_client(ctx).stats()))


@main.group()
def fixtures():
    """Bulk provisioning from NDJSON."""


@fixtures.command("load")
@click.argument("path", type=click.File("r"))
@click.pass_context
def fixtures_load(ctx, path):
    doc = _call(_client(ctx).load_fixtures(path.read()))
    _emit(doc)
    if doc.get("errors"):
        sys.exit(1)


if __name__ == "__main__":
    main()
