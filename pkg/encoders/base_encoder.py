from common.utils import get_logger


class WordEncoder:
    """
    Base word encoder, maps word pixels to d-dimensional word features

    Following members are required from subclasses
        - out_dim
        - named_tensors
        - encode
    """
    trainable = True

    def __init__(self, d):
        self.log = get_logger('Word Encoder')
        if not isinstance(d, int) or d <= 0:
            raise ValueError(f'Invalid feature dimension: {d}')
        self.d = d

    @property
    def out_dim(self):
        return self.d

    def named_tensors(self, prefix):
        """
        Learned tensors of the encoder as (name, Tensor) pairs, names start with prefix
        """
        return []

    def encode(self, words):
        """
        Encode a batch of words
        :param words: array of shape N x word_px x word_px x channels
        :return: Tensor of shape N x d
        """
        raise NotImplementedError

    def describe(self):
        """
        Constructor parameters needed to rebuild this encoder from a checkpoint manifest
        """
        return {'d': self.d}
