import logging
import logging.handlers

from backend.app.utils.logger import set_level, setup_logger


def test_no_duplicate_handlers():
    first = setup_logger('senslab_test_console', level='WARNING', log_to_file=False)
    again = setup_logger('senslab_test_console', level='WARNING', log_to_file=False)
    assert first is again
    assert len(first.handlers) == 1
    assert first.level == logging.WARNING


def test_file_handler_writes_format(tmp_path):
    path = tmp_path / 'logs' / 'run.log'
    logger = setup_logger('senslab_test_file', log_file=str(path), level='INFO', log_to_file=True)
    assert any(isinstance(h, logging.handlers.RotatingFileHandler) for h in logger.handlers)
    logger.info('Testeintrag')
    for handler in logger.handlers:
        handler.flush()
    text = path.read_text(encoding='utf-8')
    assert ' - senslab_test_file - INFO - Testeintrag' in text
    for handler in list(logger.handlers):
        handler.close()
        logger.removeHandler(handler)


def test_set_level_updates_handlers():
    logger = setup_logger('senslab_test_level', level='INFO', log_to_file=False)
    set_level(logger, 'error')
    assert logger.level == logging.ERROR
    assert all(h.level == logging.ERROR for h in logger.handlers)
    set_level(logger, 'unbekannt')
    assert logger.level == logging.INFO
