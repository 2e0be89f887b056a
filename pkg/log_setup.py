#!/usr/bin/env python3
"""
Structured logging configuration for MixFT runs
Console output for interactive use, JSON lines for batch runs
"""

import logging
import logging.config
import os
import sys

import structlog

LOG_FORMATS = ("console", "json")


def get_logging_config(level: str = "INFO") -> dict:
    """Get stdlib logging configuration; structlog renders the message itself"""
    return {
        'version': 1,
        'disable_existing_loggers': False,
        'formatters': {
            'plain': {
                'format': '%(message)s'
            }
        },
        'handlers': {
            'console': {
                'level': level,
                'class': 'logging.StreamHandler',
                'formatter': 'plain',
                'stream': 'ext://sys.stderr'
            }
        },
        'root': {
            'handlers': ['console'],
            'level': level
        }
    }


def configure_logging(level: str | None = None, fmt: str | None = None) -> None:
    """Configure structlog and stdlib logging from arguments or the environment"""
    level = (level or os.getenv('MIXFT_LOG_LEVEL', 'INFO')).upper()
    fmt = (fmt or os.getenv('MIXFT_LOG_FORMAT', 'console')).lower()
    if fmt not in LOG_FORMATS:
        fmt = 'console'

    logging.config.dictConfig(get_logging_config(level))

    renderer = (
        structlog.processors.JSONRenderer(sort_keys=True)
        if fmt == 'json'
        else structlog.dev.ConsoleRenderer(colors=sys.stderr.isatty())
    )
    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(
            logging.getLevelName(level) if isinstance(logging.getLevelName(level), int) else logging.INFO
        ),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


__all__ = ['configure_logging', 'get_logging_config', 'LOG_FORMATS']
