// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <string>
#include <vector>

#include "diffmark/audio.hpp"

namespace diffmark {

// Deterministic speech-like test signal: glottal-style harmonic source
// with a drifting f0, slowly moving formant resonances, syllabic
// amplitude modulation, pauses and aspiration noise. Not speech, but
// close enough in spectro-temporal structure to exercise the pipeline.
SpeechClip synth_speech_clip(std::uint64_t seed, double seconds = 1.0,
                             int sample_rate = kPipelineRate);

std::vector<SpeechClip> synth_corpus(std::uint64_t seed, int n_clips,
                                     double seconds = 1.0,
                                     int sample_rate = kPipelineRate);

// Writes clip_0000.wav .. into dir (created if missing).
void write_corpus(const std::string& dir, const std::vector<SpeechClip>& clips);

// Loads every *.wav in dir (sorted by name), segmenting to fixed length.
std::vector<SpeechClip> load_corpus_dir(const std::string& dir, double segment_seconds);

}  // namespace diffmark
