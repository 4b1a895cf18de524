import math

from celery import shared_task
from celery.utils.log import get_task_logger
from django.utils import timezone

from lookupffn import runners
from lookupffn.exceptions import LookupFFNError

logger = get_task_logger(__name__)


def _jsonable(value):
    # NaN and Inf are not valid JSON
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if hasattr(value, 'item'):
        return _jsonable(value.item())
    return value


@shared_task
def run_experiment(run_id):
    # import it here to prevent a cyclic import error
    from lookupffn.models import ExperimentRun
    '''
    Task function executes the runner of a given ExperimentRun and stores the
        produced rows on it.

    Args:
        run_id - uuid
    '''
    run = ExperimentRun.objects.get(id=run_id)
    run.status = ExperimentRun.RUNNING
    run.started = timezone.now()
    run.save(update_fields=['status', 'started'])
    logger.info('experiment %s (%s) started', run.id, run.kind)
    try:
        rows = runners.run(run.kind, run.params)
    except LookupFFNError as exc:
        logger.warning('experiment %s failed: %s', run.id, exc)
        run.status = ExperimentRun.FAILED
        run.error = str(exc)
    except Exception as exc:
        # a run must never stay RUNNING
        logger.exception('experiment %s crashed', run.id)
        run.status = ExperimentRun.FAILED
        run.error = '{}: {}'.format(type(exc).__name__, exc)
    else:
        run.status = ExperimentRun.DONE
        run.result = [
            {key: _jsonable(value) for key, value in row.items()} for row in rows
        ]
    run.finished = timezone.now()
    run.save(update_fields=['status', 'result', 'error', 'finished'])
    logger.info('experiment %s finished with status %s', run.id, run.status)
    return run.status
