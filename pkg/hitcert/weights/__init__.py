# Density Ratio Weights Module
