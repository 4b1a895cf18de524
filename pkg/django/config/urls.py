from django.contrib import admin
from django.urls import path, include

import lookupffn.urls


urlpatterns = [
    path('admin/', admin.site.urls),
    path('lookupffn/', include(lookupffn.urls, namespace='lookupffn')),
]
