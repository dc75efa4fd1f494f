"""
Mastosim: generative-agent election simulation on a Mastodon-compatible platform
"""

__version__ = "0.1.0"
