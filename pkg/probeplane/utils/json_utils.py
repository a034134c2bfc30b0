import json

from .file_utils import f_join, f_mkdir_in_path


def json_load(*file_path, **kwargs):
    with open(f_join(file_path), "r") as fp:
        return json.load(fp, **kwargs)


def json_loads(string, **kwargs):
    return json.loads(string, **kwargs)


def json_dump(data, *file_path, **kwargs):
    file_path = f_join(file_path)
    f_mkdir_in_path(file_path)
    with open(file_path, "w") as fp:
        json.dump(data, fp, **kwargs)


def canonical_dumps(data) -> str:
    """Byte-stable JSON: sorted keys, no whitespace. Used for plans, records and specs."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def json_lines(records) -> str:
    """One canonical JSON document per line."""
    return "".join(canonical_dumps(r) + "\n" for r in records)


# verb-first aliases, json_load -> load_json
load_json = json_load
dump_json = json_dump
