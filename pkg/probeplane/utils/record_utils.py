import logging
import re
import time

from .file_utils import *
from .json_utils import *


class ExperimentRecorder:
    """
    Keeps experiment records as JSON under <ckpt_dir>/records, one file per
    run, named <name>_<YYYYmmdd_HHMMSS>.json.
    """

    def __init__(self, ckpt_dir="ckpt", resume=False):
        self.ckpt_dir = ckpt_dir
        self.runs = 0
        self.virtual_ns = 0
        self.names = []
        f_mkdir(self.ckpt_dir, "records")
        if resume:
            self.resume()

    def record(self, record, name):
        name = re.sub(r'[\\/:"*?<>| ]', "_", name)
        name = name + time.strftime("_%Y%m%d_%H%M%S", time.localtime())
        doc = record.to_dict() if hasattr(record, "to_dict") else record
        self.runs += 1
        self.virtual_ns += int(doc.get("until", 0))
        self.names.append(name)
        logging.info(
            f"\033[96m****Recorder message: {self.virtual_ns / 1e9:.3f}s of virtual time recorded****\033[0m\n"
            f"\033[96m****Recorder message: {self.runs} runs recorded****\033[0m"
        )
        path = f_join(self.ckpt_dir, "records", name + ".json")
        dump_text(canonical_dumps(doc), path)
        return path

    def resume(self, cutoff=None):
        self.runs = 0
        self.virtual_ns = 0
        self.names = []

        def get_timestamp(string):
            timestamp = "_".join(string[: -len(".json")].split("_")[-2:])
            return time.mktime(time.strptime(timestamp, "%Y%m%d_%H%M%S"))

        records = f_listdir(self.ckpt_dir, "records", filter_ext=".json")
        for record in sorted(records, key=get_timestamp):
            if cutoff and self.runs >= cutoff:
                break
            doc = load_json(f_join(self.ckpt_dir, "records", record))
            self.runs += 1
            self.virtual_ns += int(doc.get("until", 0))
            self.names.append(record[: -len(".json")])

    def load(self, name):
        return load_json(f_join(self.ckpt_dir, "records", name + ".json"))
