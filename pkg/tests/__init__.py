# g2kit test suite
