import datetime
import importlib
import logging
import os
import sys

LOG_PREFIX = 'HATNET_LOG_PREFIX'
APP_NAME = 'HATNET_APP_NAME'
LOG_DIR = 'HATNET_LOG_DIR'
LOG_LEVEL = 'HATNET_LOG_LEVEL'
DATETIME_FORMAT = '%Y%m%d-%H%M%S'
LOG_FORMAT = '%(asctime)s %(levelname)s: (%(name)s) - %(message)s'

_log_file = None


def get_time_stamp():
    return datetime.datetime.now().strftime(DATETIME_FORMAT)


def get_log_file():
    """
    Log file path for current run, None if no log directory was configured
    :return: path or None
    """
    global _log_file
    log_dir = os.environ.get(LOG_DIR)
    if not log_dir:
        return None
    if _log_file is None or os.path.dirname(_log_file) != log_dir:
        os.makedirs(log_dir, exist_ok=True)
        prefix = os.environ.get(LOG_PREFIX, 'HATNet')
        _log_file = os.path.join(log_dir, f'{prefix}-{get_time_stamp()}.log')
    return _log_file


def get_logger(name):
    log = logging.getLogger(name)
    log.setLevel(os.environ.get(LOG_LEVEL, 'INFO').upper())
    formatter = logging.Formatter(LOG_FORMAT)

    if not any(isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler)
               for h in log.handlers):
        std_handler = logging.StreamHandler(sys.stderr)
        std_handler.setFormatter(formatter)
        log.addHandler(std_handler)

    log_file = get_log_file()
    if log_file and not any(isinstance(h, logging.FileHandler) and h.baseFilename == os.path.abspath(log_file)
                            for h in log.handlers):
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        log.addHandler(file_handler)
    log.propagate = False
    return log


def attach_log_dir(log_dir, *names):
    """
    Point the run's log file into log_dir and add file handlers to already created loggers
    :param log_dir: directory for the log file
    :param names: names of loggers created before the directory was known
    :return: log file path
    """
    os.environ[LOG_DIR] = log_dir
    for name in names:
        get_logger(name)
    return get_log_file()


def load_plugin(module_name, class_name, params):
    module = importlib.import_module(module_name)
    class_ = getattr(module, class_name)
    if params:
        return class_(**params)
    return class_()


def print_config(log, config):
    log.info(f'{"=" * 20} Configurations {"=" * 20}')
    data = config.to_dict() if hasattr(config, 'to_dict') else vars(config)
    _print_section(log, data, '')
    log.info('=' * 56)


def _print_section(log, data, indent):
    for key, value in data.items():
        if isinstance(value, dict):
            log.info(f'{indent}{key}:')
            _print_section(log, value, indent + '  ')
        else:
            log.info(f'{indent}{key}: {value}')

