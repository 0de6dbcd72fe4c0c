# Tests package for myotrack
