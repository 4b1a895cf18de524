from django.apps import AppConfig


class LookupffnConfig(AppConfig):
    name = 'lookupffn'
    default_auto_field = 'django.db.models.BigAutoField'
