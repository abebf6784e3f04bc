"""Pinned stopword list for the deterministic mock annotator.

Fixed at 50 words so mock outputs never drift between releases. Do not
reorder or extend without bumping the package version.
"""

STOPWORDS = frozenset({
    "the", "a", "an", "and", "or", "but", "if", "then", "else", "when",
    "at", "by", "for", "with", "about", "against", "between", "into", "through", "during",
    "before", "after", "above", "below", "to", "from", "up", "down", "in", "out",
    "on", "off", "over", "under", "again", "further", "once", "here", "there", "all",
    "both", "each", "this", "that", "these", "those", "is", "are", "was", "were",
})

assert len(STOPWORDS) == 50
