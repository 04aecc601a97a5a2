"""Desk-scale lab: synthetic long-tailed corpus, keyword labeler, toy decoder, experiments."""
