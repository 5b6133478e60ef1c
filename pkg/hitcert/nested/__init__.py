# Nested Design Module
