"""Two-branch weakly supervised semantic segmentation.

A classification branch produces localization seeds that are propagated
into dense maps; a segmentation branch decodes shared features into a
softmax map. Each branch's confident predictions supervise the other
(interactional pseudo supervision), the seed's object prior rescales the
decoder input, and the segmentation background channel replaces the
fixed background threshold once warmed up.
"""

__version__ = "0.1.0"
