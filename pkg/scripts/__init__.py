# Scripts module
"""
Maintenance scripts of the project.
"""
