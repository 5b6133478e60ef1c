# Test Fixtures
