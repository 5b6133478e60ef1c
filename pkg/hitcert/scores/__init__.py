# Conformity Scores Module
