"""
uncal-ps test suite
"""
