#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "saepipe/numkit.hpp"

// Synthetic segment-grammar corpus: BOS + V + random junction + J + EOS,
// with per-position substitution noise on the segment positions. Ground
// truth (segment ids, region labels, J start) is recorded before mutation.

namespace saepipe::grammar {

inline constexpr const char* kAlphabet = "ACDEFGHIKLMNPQRSTVWY";
inline constexpr int kAlphabetSize = 20;
inline constexpr int kBos = 20;
inline constexpr int kEos = 21;
inline constexpr int kVocab = 22;

// Region labels per residue.
inline constexpr char kRegionBackground = 'B';
inline constexpr char kRegionR1 = '1';
inline constexpr char kRegionR2 = '2';
inline constexpr char kRegionR3 = '3';
inline constexpr char kRegionJunction = 'J';

int token_from_char(char c);
char char_from_token(int t);

struct RegionWindow {
    int begin = 0;
    int end = 0;  // half-open, relative to segment start
};

struct GrammarSpec {
    std::vector<std::string> v_segments;
    std::vector<std::string> j_segments;  // class c is labeled J{c+1}
    int junction_min = 3;
    int junction_max = 8;
    double mutation_rate = 0.02;
    std::vector<double> j_class_probs = {0.05, 0.10, 0.15, 0.45, 0.10, 0.15};
    RegionWindow r1{8, 14};   // within V
    RegionWindow r2{22, 28};  // within V
    RegionWindow r3{3, 8};    // within J

    // Probs must sum to 1, windows must sit inside their segments, and
    // segments must stay pairwise Hamming-separated (V >= 5, J >= 8).
    void validate() const;
};

GrammarSpec default_grammar();

struct LabeledSequence {
    std::vector<int> tokens;  // BOS ... EOS
    int v_id = 0;
    int j_id = 0;
    int j_start = 0;           // index into tokens of the first J residue
    std::string regions;       // one label per token, BOS/EOS are background
};

// Derives an independent rng per sequence index from seed, so the corpus
// is identical no matter how generation is split across threads.
std::vector<LabeledSequence> sample_corpus(const GrammarSpec& spec, int n, uint64_t seed);

struct JCall {
    int j_id = -1;  // -1 means unknown
    double confidence = 0.0;
};

// Scans every window position in the last 25 tokens against each J
// segment and returns the argmin-Hamming class; ties go to the lower
// class index. Too-short input returns unknown.
JCall classify_j(const GrammarSpec& spec, const std::vector<int>& tokens);

// One letter line per sequence plus "<path>.labels.csv" with
// seq_id, v_id, j_id, j_start (letter-string index), region string.
void write_corpus(const std::string& path, const std::vector<LabeledSequence>& corpus,
                  const std::string& header_comment);
std::vector<LabeledSequence> read_corpus(const std::string& path);

}  // namespace saepipe::grammar
