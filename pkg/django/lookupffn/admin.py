from django.contrib import admin

from lookupffn.models import ExperimentRun


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ('id', 'kind', 'owner', 'status', 'created', 'finished')
    list_filter = ('kind', 'status')
    readonly_fields = ('result', 'error', 'started', 'finished')
