"""exqual: evaluate the quality of local feature-attribution explanations
for process-outcome predictors — stability across repeated explanation
runs and fidelity of the features an explanation points at.
"""

__version__ = "0.1.0"
