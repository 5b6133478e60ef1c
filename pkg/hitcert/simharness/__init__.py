# Simulation Harness Module
