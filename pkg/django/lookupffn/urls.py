from django.urls import path

from lookupffn import views

app_name = 'lookupffn'
urlpatterns = [
    path(
        'api/v1/runs',
        views.ExperimentRunListCreateView.as_view(),
        name='api-run-list'
    ),
    path(
        'api/v1/runs/<uuid:pk>',
        views.ExperimentRunRetrieveDestroyView.as_view(),
        name='api-run-detail'
    ),
]
