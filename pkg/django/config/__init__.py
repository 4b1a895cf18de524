# load the Celery app with Django so shared_task binds to the configured broker
from .celery import app as celery_app

__all__ = ('celery_app',)
