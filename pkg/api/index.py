import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

# Serverless deployments have no writable registry file
os.environ.setdefault('SKIDSTEER_REGISTRY_URI', 'none')

from src.main import app

# This is required for Vercel
app = app
