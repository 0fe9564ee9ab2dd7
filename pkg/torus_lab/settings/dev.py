from .base import *

DEBUG = True

# Chatty service logs while iterating locally
LOGGING['loggers']['laboratory']['level'] = 'DEBUG'
LOGGING['loggers']['torus_lab']['level'] = 'DEBUG'
LOGGING['handlers']['console']['formatter'] = 'verbose'
