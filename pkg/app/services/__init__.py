# app/services/__init__.py
"""
Services - the operation layer of the toolkit

Services sit between the CLI controllers and the domain models:
- worldgen_service (module functions): procedural scenes, renders, edit operators
- NVSService / EditorService: teacher and student denoisers
- DistillService: alternating consistency distillation
- SplatService: Gaussian-splat fitting and edit updates
- OracleService: analytic Gaussian-world gradient checks
- MetricsService / CheckpointService / PipelineService: evaluation and orchestration
"""
