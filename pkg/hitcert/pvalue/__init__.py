# Conformal P-Value Module
