"""MTN-TMT: transformer modal translators for video-grounded dialog."""
