"""
Services package: preprocessing, models, prioritization, detection, baselines, simulation and evaluation
"""
