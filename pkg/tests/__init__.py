__all__ = ['test_tensor', 'test_attention', 'test_model', 'test_train', 'test_evaluation', 'test_config',
           'test_synthetic', 'test_cli', 'test_acceptance']
