"""Zero-shot audio-visual speech recognition at desk scale.

Speech of any language is first transcribed into Roman text by a CTC
audio-visual romanizer; a small language model then turns the Roman text
into the target script, either as a cascaded text prompt or through a
unified bridge that feeds compressed speech features straight into the LM.
"""
