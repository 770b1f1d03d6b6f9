"""
nn-senslab: Sensitivitätsanalyse kleiner neuronaler Netze.
"""
