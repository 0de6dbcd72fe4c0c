# Core package - registration, strain and evaluation modules
