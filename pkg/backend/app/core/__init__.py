"""
Rechenkerne: Netz-Engine, Sobol-Analyse, lokale Sensitivität, Attribution, Datenzugriff.
"""
