from rest_framework import generics
from rest_framework.permissions import IsAuthenticated

from lookupffn.models import ExperimentRun
from lookupffn.permissions import CanUseExperimentRun
from lookupffn.serializers import ExperimentRunSerializer


# http://localhost:8000/lookupffn/api/v1/runs
class ExperimentRunListCreateView(generics.ListCreateAPIView):
    '''
    View allows to list the runs of the logged in user and to queue new ones
        via API.
    '''
    permission_classes = (IsAuthenticated, CanUseExperimentRun)
    serializer_class = ExperimentRunSerializer

    def get_queryset(self):
        return self.request.user.experimentrun_set.all()

    def perform_create(self, serializer):
        # the owner is always the logged in user
        serializer.save(owner=self.request.user)


# http://localhost:8000/lookupffn/api/v1/runs/<uuid:pk>
class ExperimentRunRetrieveDestroyView(generics.RetrieveDestroyAPIView):
    '''
    View allows to retrieve or delete an ExperimentRun instance via API.

    Args:
        <pk> - uuid for ExperimentRun
    '''
    permission_classes = (IsAuthenticated, CanUseExperimentRun)
    serializer_class = ExperimentRunSerializer
    queryset = ExperimentRun.objects.all()
