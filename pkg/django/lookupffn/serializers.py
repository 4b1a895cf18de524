from rest_framework import serializers

from lookupffn.models import ExperimentRun


class ExperimentRunSerializer(serializers.HyperlinkedModelSerializer):
    '''
    ExperimentRunSerializer for ExperimentRun model instances.

    Only kind and params are writable; the owner is the requesting user and
        everything else is filled in by the run_experiment task.
    '''
    owner = serializers.PrimaryKeyRelatedField(read_only=True)

    class Meta:
        model = ExperimentRun
        fields = (
            'url', 'id', 'owner', 'kind', 'params', 'status', 'result',
            'error', 'created', 'started', 'finished',
        )
        read_only_fields = (
            'status', 'result', 'error', 'created', 'started', 'finished',
        )
        extra_kwargs = {
            'url': {'view_name': 'lookupffn:api-run-detail'},
        }

    def validate_params(self, value):
        if not isinstance(value, dict):
            raise serializers.ValidationError('params must be a JSON object')
        return value
