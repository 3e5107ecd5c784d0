"""
Measurement tools: image metrics, R-D curves and BD-rate, effective
receptive fields, latency / FLOP accounting and figures.
"""
