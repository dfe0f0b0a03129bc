from .base_encoder import WordEncoder


class PrecomputedFeatures(WordEncoder):
    """
    Marker encoder for word features extracted outside this package, features pass through unchanged
    """
    trainable = False

    def __init__(self, d, **kwargs):
        super().__init__(d)

    def encode(self, words):
        raise TypeError('Precomputed mode expects WordFeatures input, not word pixels')
