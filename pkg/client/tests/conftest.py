"""Spawns a real service subprocess; the client talks to it over HTTP only."""

from __future__ import annotations

import socket
import subprocess
import sys
import time

import httpx
import pytest

from factweave_client import ClientSession


def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture()
def service_url(tmp_path):
    port = _free_port()
    addr = f"127.0.0.1:{port}"
    proc = subprocess.Popen(
        [
            sys.executable,
            "-m",
            "factweave.cli",
            "--snapshot",
            str(tmp_path / "service.tsv"),
            "serve",
            "--addr",
            addr,
            "--empty",
        ],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
    )
    url = f"http://{addr}"
    try:
        deadline = time.time() + 10
        while True:
            try:
                httpx.get(url + "/stats", timeout=1.0)
                break
            except httpx.HTTPError:
                if time.time() > deadline or proc.poll() is not None:
                    raise RuntimeError("service failed to start")
                time.sleep(0.05)
        yield url
    finally:
        proc.terminate()
        proc.wait(timeout=10)


@pytest.fixture()
def session(service_url):
    with ClientSession(service_url, timeout=5.0) as client:
        yield client


NAPOLEON = {"entity": "Napoleon", "relation": "Birth_Date", "value": "August 15, 1769"}


@pytest.fixture()
def seeded(session):
    assert session.ingest(triplets=[NAPOLEON], source_id="doc1") == 1
    return session
