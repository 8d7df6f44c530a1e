import json, logging, logging.config, os, time, uuid
from contextlib import contextmanager

run_id = str(uuid.uuid4())
experiment = os.environ.get("SILNET_EXPERIMENT", "default")

CONTEXT_FIELDS = {"run_id": run_id, "experiment": experiment}

# Attributes every LogRecord has; everything else on a record came in through `extra`.
_RECORD_ATTRS = set(vars(logging.makeLogRecord({}))) | {"message", "asctime"}

# Chatty third-party loggers that only matter when something is wrong.
QUIET_LOGGERS = ("matplotlib", "PIL", "torch.distributed")


class JsonFormatter(logging.Formatter):
    """One JSON object per record, with the run context and any extra fields (epoch, step, variant)."""
    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "ts": f"{self.formatTime(record, '%Y-%m-%dT%H:%M:%S')}.{int(record.msecs):03d}",
            "level": record.levelname,
            "logger": record.name,
            "msg": record.getMessage(),
        }
        entry.update({k: v for k, v in vars(record).items() if k not in _RECORD_ATTRS and not k.startswith("_")})
        if record.exc_info:
            entry["exc"] = self.formatException(record.exc_info)
        return json.dumps(entry, ensure_ascii=False, default=str)


class ContextFilter(logging.Filter):
    """Fills the context fields on records that did not come through get_logger (torch, matplotlib)."""
    def filter(self, record: logging.LogRecord) -> bool:
        for key, value in CONTEXT_FIELDS.items():
            if not hasattr(record, key):
                setattr(record, key, value)
        return True


def setup_logging(log_dir=None, base_name="silhouette_net.log", level=logging.INFO):
    """
    Console lines for people, a daily-rotated JSON file for tooling. The file lives in
    `log_dir`, `SILNET_LOG_DIR` or `logs/`, in that order.
    """
    log_dir = log_dir or os.environ.get("SILNET_LOG_DIR", "logs")
    os.makedirs(log_dir, exist_ok=True)
    handler_defaults = {"filters": ["context"], "level": level}
    logging.config.dictConfig({
        "version": 1,
        "disable_existing_loggers": False,
        "filters": {"context": {"()": ContextFilter}},
        "formatters": {
            "console": {"format": "%(asctime)s %(levelname)s %(name)s [run=%(run_id)s exp=%(experiment)s] %(message)s"},
            "json": {"()": JsonFormatter},
        },
        "handlers": {
            "console": {"class": "logging.StreamHandler", "stream": "ext://sys.stdout",
                        "formatter": "console", **handler_defaults},
            "file": {"class": "logging.handlers.TimedRotatingFileHandler",
                     "filename": os.path.join(log_dir, base_name),
                     "when": "midnight", "backupCount": 14, "encoding": "utf-8",
                     "formatter": "json", **handler_defaults},
        },
        "loggers": {name: {"level": logging.WARNING} for name in QUIET_LOGGERS},
        "root": {"handlers": ["console", "file"], "level": level},
    })


@contextmanager
def log_span(logger, name: str, **fields):
    """Brackets a unit of work (a command, a grid variant) with START and END records; failures add ERROR."""
    started = time.perf_counter()
    logger.info(f"START {name}", extra=fields)
    try:
        yield
    except Exception:
        logger.exception(f"ERROR {name}", extra=fields)
        raise
    finally:
        logger.info(f"END {name}", extra={**fields, "duration_s": round(time.perf_counter() - started, 3)})


class ContextAdapter(logging.LoggerAdapter):
    """Merges per-call extra fields into the adapter's context instead of replacing it."""
    def process(self, msg, kwargs):
        kwargs["extra"] = {**self.extra, **kwargs.get("extra", {})}
        return msg, kwargs


def get_logger(component: str = "main") -> ContextAdapter:
    return ContextAdapter(logging.getLogger(f"silhouette_net.{component}"), dict(CONTEXT_FIELDS))
