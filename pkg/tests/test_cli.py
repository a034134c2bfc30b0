import io
import json

import pytest

from probeplane.cli import EXIT_FAILED, EXIT_OK, EXIT_USAGE, render, run, split_command
from probeplane.errors import NoSuchProbe, ParseError

MS = 1_000_000


def records(out: io.StringIO) -> list:
    return [json.loads(line) for line in out.getvalue().splitlines()]


async def batch(tmp_path, text, *flags):
    script = tmp_path / "session.txt"
    script.write_text(text)
    out = io.StringIO()
    status = await run(["--json", "--script", str(script), *flags], out=out)
    return status, records(out)


def test_split_command():
    assert split_command("probe install probe_counter.json --device A --force  # note") == (
        "probe install", ["probe_counter.json"], {"device": "A", "force": True})
    assert split_command("   # only a comment") == ("", [], {})
    with pytest.raises(ParseError) as info:
        split_command("query rnu q.json", 4)
    assert info.value.line == 4
    assert "query run" in info.value.hint


async def test_session_script(tmp_path):
    status, out = await batch(tmp_path, "\n".join([
        "probe install probe_counter.json --device A",
        "pools --device A",
        "query run query_link_latency.json",
        f"advance {50 * MS}",
        "query list",
        "read-counter counter:0 --device A",
    ]))
    assert status == EXIT_OK
    assert all(r["ok"] for r in out)
    assert out[0]["result"] == {"probe_id": 1}
    counters = next(p for p in out[1]["result"] if p["class"] == "counter")
    assert counters["allocated"] == 1
    assert out[2]["result"] == {"handle": "lat-ab/lat-ab"}
    assert out[3]["result"] == {"now": 50 * MS}
    (query,) = out[4]["result"]
    assert query["active"] and query["rows"] == 4


async def test_failing_command_stops_the_batch(tmp_path):
    status, out = await batch(tmp_path, "probe revoke 9 --device A\ndev list\n")
    assert status == EXIT_FAILED
    assert len(out) == 1
    assert not out[0]["ok"]
    assert out[0]["code"] == NoSuchProbe.code


@pytest.mark.parametrize("line", ["teleport now", "advance -5", "advance soon", "probe list"])
async def test_usage_errors(tmp_path, line):
    status, out = await batch(tmp_path, line)
    assert status == EXIT_USAGE
    assert out[0]["code"] == ParseError.code


async def test_quit_ends_the_batch(tmp_path):
    status, out = await batch(tmp_path, "help\nquit\nteleport")
    assert status == EXIT_OK
    assert len(out) == 1


async def test_single_command_and_plain_output():
    out = io.StringIO()
    assert await run(["dev", "list"], out=out) == EXIT_OK
    header = out.getvalue().splitlines()[0].split()
    assert header[:4] == ["device", "ports", "online", "tables"]


async def test_missing_script_is_a_usage_error(tmp_path):
    assert await run(["--script", str(tmp_path / "absent.txt")], out=io.StringIO()) == EXIT_USAGE


def test_render():
    assert render([{"a": 1, "b": "xy"}, {"a": 22}]) == "a   b \n1   xy\n22    "
    assert render({"now": 5}) == "now: 5"
    assert render([]) == "(none)"
