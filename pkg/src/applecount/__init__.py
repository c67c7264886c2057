"""Count apples in orchard imagery by classifying cluster patches."""
