# Settings are split per environment:
#   torus_lab.settings.dev   - local runs (manage.py default)
#   torus_lab.settings.test  - pytest-django
# Select one with DJANGO_SETTINGS_MODULE.
