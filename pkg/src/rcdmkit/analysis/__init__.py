"""
Experiments on trained encoders: representation matching, manipulation,
adversarial probing and faithfulness evaluation.
"""
