# app/models/__init__.py
#
# Domain types of the toolkit (no training logic lives here)
#
# scene.py             procedural worlds, cameras, view sets, render maps, edit operators
# schedule.py          discrete noise schedules and the forward process
# nets.py              toy denoisers and low-rank adapters
# gaussian_cloud.py    explicit Gaussian-splat scenes
# mixture.py           analytic Gaussian / mixture distributions and linear generators
# experiment_config.py pydantic experiment configuration
# artifact_cache.py    lazy, mtime-aware cache of trained artifacts
