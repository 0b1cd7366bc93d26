"""
dynreach CLI Package
"""
