# Baselines Module
