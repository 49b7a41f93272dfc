"""
Internal implementation of ScaleAgent
""" 