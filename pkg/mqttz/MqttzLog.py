import json
import logging
import time

ROOT_LOGGER = 'mqttz'


class JsonLineFormatter(logging.Formatter):
    """
    Formats each record as a single-line JSON object: ts, level, logger, event and any
    structured fields attached by `log_event`.
    """

    def format(self, record):
        out = {'ts': round(record.created, 6),
               'level': record.levelname,
               'logger': record.name,
               'event': getattr(record, 'event', record.getMessage())}
        fields = getattr(record, 'fields', None)
        if fields:
            out.update(fields)
        if record.exc_info:
            out['exc'] = self.formatException(record.exc_info)
        return json.dumps(out, default=str, sort_keys=False)


def get_logger(name=None):
    """
    Return a logger in the mqttz namespace.

    :param string/NoneType name: sub-logger name, eg 'broker'
    """
    if name is None:
        return logging.getLogger(ROOT_LOGGER)
    return logging.getLogger('%s.%s' % (ROOT_LOGGER, name))


def configure_logging(level=logging.INFO, stream=None, path=None):
    """
    Install the JSON line formatter on the mqttz root logger.

    :param int level: logging level
    :param stream/NoneType stream: stream for the handler (default stderr)
    :param string/NoneType path: optional event log file; used instead of stream if given
    :return: the installed handler
    """
    handler = logging.FileHandler(path) if path is not None else logging.StreamHandler(stream)
    handler.setFormatter(JsonLineFormatter())
    root = get_logger()
    for h in list(root.handlers):
        if isinstance(h.formatter, JsonLineFormatter):
            root.removeHandler(h)
    root.addHandler(handler)
    root.setLevel(level)
    return handler


def log_event(logger, event, level=logging.INFO, **fields):
    """
    Emit one structured event record.

    :param logging.Logger logger: target logger
    :param string event: event name, eg 'handshake_ok'
    :param int level: logging level
    :param fields: JSON-serializable fields; never pass key material or payload bytes
    """
    if logger.isEnabledFor(level):
        logger.log(level, event, extra={'event': event, 'fields': fields})


class EventCapture(logging.Handler):
    """
    Keeps (event, fields) tuples in memory; handy for tests and for the bench harness.
    """

    def __init__(self):
        super(EventCapture, self).__init__(level=logging.DEBUG)
        self.records = []

    def emit(self, record):
        self.records.append((getattr(record, 'event', record.getMessage()),
                             dict(getattr(record, 'fields', None) or {}),
                             time.time()))

    def events(self, name=None):
        return [r for r in self.records if name is None or r[0] == name]

    def detach(self):
        get_logger().removeHandler(self)


def capture_events(level=logging.DEBUG):
    """
    Attach an `EventCapture` handler to the mqttz root logger.

    :param int level: level to enable on the root logger
    :return: EventCapture -- call `detach()` when done
    """
    cap = EventCapture()
    root = get_logger()
    root.addHandler(cap)
    root.setLevel(level)
    return cap
