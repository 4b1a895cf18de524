import factory

from unittest.mock import patch

from django.contrib.auth import get_user_model

from lookupffn.models import ExperimentRun


class UserFactory(factory.django.DjangoModelFactory):

    username = factory.Sequence(lambda n: 'runner.%d' % n)

    class Meta:
        model = get_user_model()


class ExperimentRunFactory(factory.django.DjangoModelFactory):

    owner = factory.SubFactory(UserFactory)
    kind = 'flops'
    params = factory.LazyFunction(lambda: {'vanilla': '512,2048,512'})

    class Meta:
        model = ExperimentRun

    @classmethod
    def _create(cls, model_class, *args, **kwargs):
        with patch('lookupffn.models.tasks.run_experiment'):
            return super()._create(model_class, *args, **kwargs)
