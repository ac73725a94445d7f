"""memodetector - meme emotion understanding with MLLM text enhancement and dual-stage fusion"""

__version__ = "0.1.0"
