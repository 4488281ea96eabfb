#include "saepipe/grammar.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace saepipe::grammar {

namespace {

// Fixed libraries, generated once from a master seed. Pairwise Hamming
// distances: V >= 36, J >= 14 (re-checked by validate()).
const std::vector<std::string> kVSegments = {
    "PVSFGFRVNPDSEDIPVPINYQDVVSKMESFHVLGIHCKH",
    "WQCTQQIRQDKDIEYYLDKQTFWTDPEEHAYDERGDEGTF",
    "IVRFTVWCLDYRYPRPCTKNVYQQHGMHSYWDRVSHGKPM",
    "NIFTGEWAATPWASCFEAHVDDTPKWYASYIIYLHFRYPE",
    "CFENFRNIKENINIPSIGVDGQVQDSCAQDSHSMNGLEDH",
    "ESGKMTQKYEKPNWDGYELRGVRKFLRDEPLFCHCLYEKS",
};

const std::vector<std::string> kJSegments = {
    "GDTREDYFKCMCWIK",
    "NVQGDRQEMHGHILV",
    "PCEILCMWYNKPCSI",
    "HEKSYGRHPVVNHGK",
    "VFSNTWEYHDYADLE",
    "WNGKAHLHSFERGII",
};

int hamming(const std::string& a, const std::string& b) {
    int d = 0;
    for (size_t i = 0; i < a.size(); ++i) d += (a[i] != b[i]);
    return d;
}

}  // namespace

int token_from_char(char c) {
    const char* p = std::strchr(kAlphabet, c);
    if (!p || c == '\0') throw std::invalid_argument(std::string("unknown symbol: ") + c);
    return static_cast<int>(p - kAlphabet);
}

char char_from_token(int t) {
    if (t < 0 || t >= kAlphabetSize) throw std::invalid_argument("token outside letter range");
    return kAlphabet[t];
}

void GrammarSpec::validate() const {
    if (v_segments.size() != 6 || j_segments.size() != 6) {
        throw std::invalid_argument("grammar needs 6 V and 6 J segments");
    }
    for (const auto& s : v_segments) {
        if (s.size() != 40) throw std::invalid_argument("V segment length must be 40");
    }
    for (const auto& s : j_segments) {
        if (s.size() != 15) throw std::invalid_argument("J segment length must be 15");
    }
    for (size_t i = 0; i < v_segments.size(); ++i) {
        for (size_t j = i + 1; j < v_segments.size(); ++j) {
            if (hamming(v_segments[i], v_segments[j]) < 5) {
                throw std::invalid_argument("V segments too close");
            }
        }
    }
    for (size_t i = 0; i < j_segments.size(); ++i) {
        for (size_t j = i + 1; j < j_segments.size(); ++j) {
            if (hamming(j_segments[i], j_segments[j]) < 8) {
                throw std::invalid_argument("J segments too close");
            }
        }
    }
    if (j_class_probs.size() != j_segments.size()) {
        throw std::invalid_argument("j_class_probs size mismatch");
    }
    double sum = 0.0;
    for (double p : j_class_probs) {
        if (p < 0.0) throw std::invalid_argument("negative class prob");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("class probs must sum to 1");
    if (junction_min < 0 || junction_max < junction_min) {
        throw std::invalid_argument("bad junction length range");
    }
    auto check_window = [](const RegionWindow& w, int seg_len, const char* name) {
        if (w.begin < 0 || w.end <= w.begin || w.end > seg_len) {
            throw std::invalid_argument(std::string("region window out of bounds: ") + name);
        }
    };
    check_window(r1, 40, "R1");
    check_window(r2, 40, "R2");
    check_window(r3, 15, "R3");
}

GrammarSpec default_grammar() {
    GrammarSpec spec;
    spec.v_segments = kVSegments;
    spec.j_segments = kJSegments;
    spec.validate();
    return spec;
}

namespace {

int sample_class(const std::vector<double>& probs, numkit::Rng& rng) {
    double u = rng.uniform();
    double acc = 0.0;
    for (size_t c = 0; c < probs.size(); ++c) {
        acc += probs[c];
        if (u < acc) return static_cast<int>(c);
    }
    return static_cast<int>(probs.size()) - 1;
}

// Substitute with probability rate, drawing uniformly from the other 19
// letters. One uniform() per position keeps the stream layout fixed.
void mutate(std::vector<int>& tokens, int begin, int end, double rate, numkit::Rng& rng) {
    for (int i = begin; i < end; ++i) {
        if (rng.uniform() < rate) {
            int repl = static_cast<int>(rng.uniform_int(kAlphabetSize - 1));
            if (repl >= tokens[static_cast<size_t>(i)]) ++repl;
            tokens[static_cast<size_t>(i)] = repl;
        }
    }
}

}  // namespace

std::vector<LabeledSequence> sample_corpus(const GrammarSpec& spec, int n, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("sample_corpus: n must be >= 1");
    spec.validate();
    std::vector<LabeledSequence> out(static_cast<size_t>(n));
    numkit::parallel_for(static_cast<size_t>(n), [&](size_t i) {
        numkit::Rng rng(numkit::Rng::derive(seed, i));
        LabeledSequence& s = out[i];
        s.v_id = static_cast<int>(rng.uniform_int(spec.v_segments.size()));
        s.j_id = sample_class(spec.j_class_probs, rng);
        int jl = spec.junction_min +
                 static_cast<int>(rng.uniform_int(
                     static_cast<uint64_t>(spec.junction_max - spec.junction_min + 1)));

        const std::string& v = spec.v_segments[static_cast<size_t>(s.v_id)];
        const std::string& j = spec.j_segments[static_cast<size_t>(s.j_id)];

        s.tokens.push_back(kBos);
        s.regions.push_back(kRegionBackground);
        int v_start = static_cast<int>(s.tokens.size());
        for (size_t p = 0; p < v.size(); ++p) {
            s.tokens.push_back(token_from_char(v[p]));
            char label = kRegionBackground;
            if (static_cast<int>(p) >= spec.r1.begin && static_cast<int>(p) < spec.r1.end) label = kRegionR1;
            if (static_cast<int>(p) >= spec.r2.begin && static_cast<int>(p) < spec.r2.end) label = kRegionR2;
            s.regions.push_back(label);
        }
        for (int p = 0; p < jl; ++p) {
            s.tokens.push_back(static_cast<int>(rng.uniform_int(kAlphabetSize)));
            s.regions.push_back(kRegionJunction);
        }
        s.j_start = static_cast<int>(s.tokens.size());
        for (size_t p = 0; p < j.size(); ++p) {
            s.tokens.push_back(token_from_char(j[p]));
            s.regions.push_back(static_cast<int>(p) >= spec.r3.begin && static_cast<int>(p) < spec.r3.end
                                    ? kRegionR3
                                    : kRegionBackground);
        }
        s.tokens.push_back(kEos);
        s.regions.push_back(kRegionBackground);

        // Substitutions hit segment positions only, never the junction.
        mutate(s.tokens, v_start, v_start + static_cast<int>(v.size()), spec.mutation_rate, rng);
        mutate(s.tokens, s.j_start, s.j_start + static_cast<int>(j.size()), spec.mutation_rate, rng);
    });
    return out;
}

JCall classify_j(const GrammarSpec& spec, const std::vector<int>& tokens) {
    // Work on the letter run: skip BOS, stop at the first EOS.
    std::vector<int> letters;
    letters.reserve(tokens.size());
    for (int t : tokens) {
        if (t == kBos) continue;
        if (t == kEos) break;
        letters.push_back(t);
    }
    int seg_len = static_cast<int>(spec.j_segments[0].size());
    int len = static_cast<int>(letters.size());
    if (len < seg_len + 2) return {};

    int scan_from = std::max(0, len - 25);
    int best_class = -1;
    int best_dist = seg_len + 1;
    for (size_t c = 0; c < spec.j_segments.size(); ++c) {
        const std::string& seg = spec.j_segments[c];
        for (int ofs = scan_from; ofs + seg_len <= len; ++ofs) {
            int d = 0;
            for (int p = 0; p < seg_len; ++p) {
                d += (letters[static_cast<size_t>(ofs + p)] != token_from_char(seg[static_cast<size_t>(p)]));
            }
            if (d < best_dist) {
                best_dist = d;
                best_class = static_cast<int>(c);
            }
        }
    }
    if (best_class < 0) return {};
    return {best_class, 1.0 - static_cast<double>(best_dist) / static_cast<double>(seg_len)};
}

void write_corpus(const std::string& path, const std::vector<LabeledSequence>& corpus,
                  const std::string& header_comment) {
    std::ofstream seq_out(path, std::ios::binary);
    if (!seq_out) throw std::runtime_error("cannot write " + path);
    std::ofstream csv_out(path + ".labels.csv", std::ios::binary);
    if (!csv_out) throw std::runtime_error("cannot write " + path + ".labels.csv");

    if (!header_comment.empty()) csv_out << "# " << header_comment << "\n";
    csv_out << "seq_id,v_id,j_id,j_start,regions\n";
    for (size_t i = 0; i < corpus.size(); ++i) {
        const auto& s = corpus[i];
        std::string line;
        for (int t : s.tokens) {
            if (t == kBos || t == kEos) continue;
            line.push_back(char_from_token(t));
        }
        seq_out << line << "\n";
        // File-level j_start and regions index the letter string (no BOS).
        csv_out << i << ',' << s.v_id << ',' << s.j_id << ',' << (s.j_start - 1) << ','
                << s.regions.substr(1, s.regions.size() - 2) << "\n";
    }
    if (!seq_out.flush()) throw std::runtime_error("write failed: " + path);
    if (!csv_out.flush()) throw std::runtime_error("write failed: " + path + ".labels.csv");
}

std::vector<LabeledSequence> read_corpus(const std::string& path) {
    std::ifstream seq_in(path, std::ios::binary);
    if (!seq_in) throw std::runtime_error("cannot read " + path);
    std::ifstream csv_in(path + ".labels.csv", std::ios::binary);
    if (!csv_in) throw std::runtime_error("cannot read " + path + ".labels.csv");

    std::vector<LabeledSequence> out;
    std::string seq_line, csv_line;
    while (std::getline(csv_in, csv_line)) {
        if (csv_line.empty() || csv_line[0] == '#') continue;
        if (csv_line.rfind("seq_id,", 0) == 0) continue;
        if (!std::getline(seq_in, seq_line)) throw std::runtime_error("corpus shorter than labels: " + path);
        std::stringstream ss(csv_line);
        std::string field;
        LabeledSequence s;
        std::getline(ss, field, ',');  // seq_id, implied by order
        std::getline(ss, field, ',');
        s.v_id = std::stoi(field);
        std::getline(ss, field, ',');
        s.j_id = std::stoi(field);
        std::getline(ss, field, ',');
        s.j_start = std::stoi(field) + 1;
        std::getline(ss, field, ',');
        s.tokens.push_back(kBos);
        for (char c : seq_line) s.tokens.push_back(token_from_char(c));
        s.tokens.push_back(kEos);
        s.regions = std::string(1, kRegionBackground) + field + kRegionBackground;
        if (s.regions.size() != s.tokens.size()) {
            throw std::runtime_error("region string length mismatch in " + path);
        }
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace saepipe::grammar
