"""Thin CLI client over the HTTP service.

Every subcommand goes through the service API: against a remote server
when --server is given, otherwise against an in-process ASGI app (no
socket involved, same filesystem).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import httpx

from .service import create_app

# desk-scale experiments can run for many minutes inside one request
TIMEOUT = httpx.Timeout(10.0, read=7200.0, write=60.0)


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=TIMEOUT)
    # in-process ASGI transport: no socket, same filesystem
    from fastapi.testclient import TestClient

    return TestClient(create_app(), raise_server_exceptions=False)


def _call(server, method, path, **kwargs):
    with _client(server) as client:
        resp = client.request(method, path, **kwargs)
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise click.ClickException(f"{path} failed ({resp.status_code}): {detail}")
    return resp.json()


@click.group()
def main():
    """Few-shot speech emotion recognition experiment runner."""


@main.command()
@click.argument("config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None, help="master seed override")
@click.option("--output-dir", type=click.Path(), default=None)
@click.option("--profile", type=click.Choice(["smoke", "paper"]), default=None)
@click.option("--jobs", type=int, default=None, help="parallel grid cells")
@click.option("--server", default=None, help="remote service URL")
def run(config_path, seed, output_dir, profile, jobs, server):
    """Run the experiment grid described by CONFIG_PATH."""
    from .harness import ConfigError, parse_config  # validate locally for early errors

    try:
        cfg = parse_config(config_path, profile=profile)
    except ConfigError as exc:
        raise click.ClickException(str(exc))
    payload = {
        "config": _config_file_values(config_path),
        "profile": profile,
        "seed": seed,
        "output_dir": output_dir,
        "jobs": jobs,
    }
    data = _call(server, "POST", "/experiments", json=payload)
    report = data["report"]
    rendered = _call(server, "POST", "/reports/render", json={"report": report})
    click.echo(rendered["text"], nl=False)
    out = output_dir or cfg.output_dir
    click.echo(f"report written to {out}/report.json")


def _config_file_values(path) -> dict:
    from .harness import _FIELD_TYPES, _parse_value, ConfigError

    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise click.ClickException(f"{path}:{lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        values[key.strip()] = _parse_value(key.strip(), raw)
    return values


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--languages", default=None, help="comma-separated names")
@click.option("--clips-per-emotion", type=int, default=None)
@click.option("--fixed-per-class", type=int, default=60)
@click.option("--seed", type=int, default=0)
@click.option("--clip-seconds", type=float, default=3.5)
@click.option("--server", default=None)
def synth(out_dir, languages, clips_per_emotion, fixed_per_class, seed, clip_seconds, server):
    """Write a synthetic WAV corpus to disk."""
    payload = {
        "out_dir": out_dir,
        "fixed_per_class": fixed_per_class,
        "seed": seed,
        "clip_seconds": clip_seconds,
        "clips_per_emotion": clips_per_emotion,
    }
    if languages:
        payload["languages"] = [l.strip() for l in languages.split(",")]
    data = _call(server, "POST", "/corpora/synth", json=payload)
    click.echo(f"wrote {data['written']} clips under {data['out_dir']}")


@main.command()
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--cache", "cache_dir", required=True, type=click.Path())
@click.option("--server", default=None)
def features(corpus_dir, cache_dir, server):
    """Precompute the MFCC feature cache for a WAV corpus."""
    data = _call(
        server, "POST", "/features", json={"corpus_dir": corpus_dir, "cache_dir": cache_dir}
    )
    click.echo(f"cached {data['written']} feature files under {data['cache_dir']}")


@main.command()
@click.argument("report_path", type=click.Path(exists=True))
@click.option("--csv", "as_csv", is_flag=True, help="emit CSV instead of text")
@click.option("--server", default=None)
def report(report_path, as_csv, server):
    """Re-render the accuracy tables from a report.json."""
    body = json.loads(Path(report_path).read_text())
    data = _call(server, "POST", "/reports/render", json={"report": body})
    click.echo(data["csv"] if as_csv else data["text"], nl=False)


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve(host, port):
    """Start the HTTP service."""
    import uvicorn

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    sys.exit(main())
