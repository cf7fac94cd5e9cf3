import sentry_sdk
import os
import dj_database_url
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()

PROJECT_NAME = "Dual-server secure aggregation"

BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.getenv('SECRET', 'local-simulator-key')

DEBUG = (os.getenv('DEBUG') == 'True')

if not DEBUG and os.getenv('SENTRY_DSN'):
    sentry_sdk.init(
        dsn=os.getenv("SENTRY_DSN"),
        auto_session_tracking=False,
        traces_sample_rate=0.001,
        send_default_pii=False,
    )

ALLOWED_HOSTS = ['localhost', '127.0.0.1']

INSTALLED_APPS = [
    'aggregator.apps.AggregatorConfig',
]

# Database
DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': os.path.join(BASE_DIR, 'dev.db'),
    }
}

if os.getenv('DATABASE_URL'):
    db_from_env = dj_database_url.config(conn_max_age=600)
    DATABASES['default'].update(db_from_env)

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

TIME_ZONE = 'UTC'
USE_TZ = True

# Experiment output: metrics CSV, transcripts and charts
AGGREGATOR_OUTPUT_DIR = os.getenv('AGGREGATOR_OUTPUT_DIR', str(BASE_DIR / 'output'))

# Online rounds slower than this are reported to Sentry
LONG_ROUND_SECONDS = float(os.getenv('LONG_ROUND_SECONDS', 30))

MAX_FRAME_BYTES = int(os.getenv('MAX_FRAME_BYTES', 256 * 1024 * 1024))

# Logging
SLACK_WEBHOOK = os.getenv('SLACK_WEBHOOK')
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'simple': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'loggers': {
        'aggregator': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
    },
}

if SLACK_WEBHOOK:
    LOGGING['handlers']['slack'] = {
        'class': 'conf.logger.SlackExceptionHandler',
        'level': 'ERROR',
    }
    LOGGING['loggers']['aggregator']['handlers'].append('slack')
