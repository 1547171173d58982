import datetime
import json
import logging
import re
import traceback

import numpy as np

LOG_FORMAT_REGEXP = re.compile(r"\((.+?)\)", re.IGNORECASE)


def _json_default(obj):
    """
    Coerce numerical payloads to plain json types; everything else to str.
    """
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (datetime.date, datetime.time, datetime.datetime)):
        return obj.isoformat()
    if isinstance(obj, Exception):
        return f"Exception: {obj!r}"
    return str(obj)


# skip natural LogRecord attributes
# http://docs.python.org/library/logging.html#logrecord-attributes
RESERVED_ATTRS = frozenset(
    logging.LogRecord("", 0, "", 0, "", (), None).__dict__.keys()
) | {"message", "asctime"}


class JsonFormatter(logging.Formatter):
    """
    Formats records as one json object per line. Fields passed through
    ``extra=`` (k, n, epoch, loss, ...) are nested under ``prefix_key``.
    """

    def __init__(self, *args, **kwargs):
        self.json_default = kwargs.pop("json_default", _json_default)
        self.json_encoder = kwargs.pop("json_encoder", None)
        self.prefix_key = kwargs.pop("prefix_key", "data")
        super().__init__(*args, **kwargs)
        self._fmt_parameters = LOG_FORMAT_REGEXP.findall(self._fmt or "")

    def add_fields(self, log_record, record, message_dict):
        target = log_record
        if self.prefix_key:
            target = log_record.setdefault(self.prefix_key, {})

        for field in self._fmt_parameters:
            log_record[field] = getattr(record, field, None)
        for field, value in record.__dict__.items():
            if field not in RESERVED_ATTRS:
                target[field] = value
        target.update(message_dict)

    def format(self, record):
        message_dict = {}
        if isinstance(record.msg, dict):
            message_dict = dict(record.msg)
            record.message = message_dict.pop("message", None)
        else:
            record.message = record.getMessage()

        if "asctime" in self._fmt_parameters:
            record.asctime = self.formatTime(record, self.datefmt)

        if record.exc_info and not message_dict.get("exc_info"):
            message_dict["exc_info"] = traceback.format_exception(*record.exc_info)

        log_record = {}
        self.add_fields(log_record, record, message_dict)
        return json.dumps(log_record, default=self.json_default, cls=self.json_encoder)
