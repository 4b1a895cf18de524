from rest_framework.permissions import BasePermission

from lookupffn.models import ExperimentRun


class CanUseExperimentRun(BasePermission):
    '''
    Permission class for serializer.
    Checks whether user can perform operations with an ExperimentRun using its
        user_can_use_run() method.
    '''
    message = 'User does not have access to this resource.'

    def has_object_permission(self, request, view, obj):
        if isinstance(obj, ExperimentRun):
            return obj.user_can_use_run(request.user)
        return False
