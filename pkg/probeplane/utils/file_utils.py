"""
File system utils.
"""
import collections
import os

get_dir = os.path.dirname


def _flatten(fpaths):
    # accept either f(*parts) or f([parts])
    if len(fpaths) == 1 and isinstance(fpaths[0], collections.abc.Sequence) \
            and not isinstance(fpaths[0], (str, bytes)):
        return fpaths[0]
    return fpaths


def f_join(*fpaths):
    """
    join file paths and expand `~` and environment variables
    """
    fpath = os.path.join(*_flatten(fpaths))
    return os.path.expandvars(os.path.expanduser(fpath)).strip()


def f_exists(*fpaths):
    return os.path.exists(f_join(*fpaths))


def f_listdir(*fpaths, filter_ext=None):
    """Sorted names in a directory, [] if it does not exist."""
    dir_path = f_join(*fpaths)
    if not os.path.exists(dir_path):
        return []
    return sorted(f for f in os.listdir(dir_path) if filter_ext is None or f.endswith(filter_ext))


def f_mkdir(*fpaths):
    fpath = f_join(*fpaths)
    os.makedirs(fpath, exist_ok=True)
    return fpath


def f_mkdir_in_path(*fpaths):
    """Create the parent directories of a file path."""
    parent = get_dir(f_join(*fpaths))
    if parent:
        os.makedirs(parent, exist_ok=True)


def dump_text(s, *fpaths):
    f_mkdir_in_path(*fpaths)
    with open(f_join(*fpaths), "w") as fp:
        fp.write(s)


def load_bytes(*fpaths) -> bytes:
    with open(f_join(*fpaths), "rb") as fp:
        return fp.read()


def dump_bytes(data: bytes, *fpaths):
    f_mkdir_in_path(*fpaths)
    with open(f_join(*fpaths), "wb") as fp:
        fp.write(data)
