# Tests for the ReVal lab
