import uuid

from django.conf import settings
from django.db import models

from lookupffn import tasks


class ExperimentRun(models.Model):
    '''
    ExperimentRun.Model

    One execution of an experiment runner. params holds the runner
        parameters, result the rows it produced.

    Id field made muted and nonsequential due to being publicly exposed to
        users.
    '''
    KIND_CHOICES = [
        ('flops', 'FLOP report'),
        ('grad-check', 'Gradient check'),
        ('train-toy', 'Toy training'),
        ('sweep', 'Sweep'),
        ('bench', 'Benchmark'),
        ('lsh-diag', 'LSH diagnostics'),
        ('approx-matrix', 'Matrix approximation'),
        ('checkpoint-io', 'Checkpoint round trip'),
    ]
    PENDING = 'pending'
    RUNNING = 'running'
    DONE = 'done'
    FAILED = 'failed'
    STATUS_CHOICES = [
        (PENDING, 'Pending'),
        (RUNNING, 'Running'),
        (DONE, 'Done'),
        (FAILED, 'Failed'),
    ]

    id = models.UUIDField(
        primary_key=True,
        default=uuid.uuid4,
        editable=False
    )
    owner = models.ForeignKey(
        to=settings.AUTH_USER_MODEL,
        on_delete=models.CASCADE
    )
    kind = models.CharField(max_length=32, choices=KIND_CHOICES)
    params = models.JSONField(default=dict, blank=True)
    status = models.CharField(
        max_length=16,
        choices=STATUS_CHOICES,
        default=PENDING
    )
    result = models.JSONField(default=None, null=True, blank=True)
    error = models.TextField(blank=True, default='')
    created = models.DateTimeField(auto_now_add=True)
    started = models.DateTimeField(default=None, null=True)
    finished = models.DateTimeField(default=None, null=True)

    class Meta:
        ordering = ['-created']

    def __str__(self):
        return '{} {}'.format(self.kind, self.id)

    def user_can_use_run(self, user):
        # checks whether request.user can see or delete this run
        return user == self.owner

    def save(self, force_insert=False, force_update=False, using=None,
             update_fields=None):
        # Adds run_experiment asynchronous task to a queue for execution if
        # object has been added to a database.
        is_new = self._state.adding or force_insert
        super().save(
            force_insert=force_insert,
            force_update=force_update,
            using=using,
            update_fields=update_fields,
        )
        if is_new:
            tasks.run_experiment.delay(self.id)
