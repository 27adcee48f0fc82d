#include "veco/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "veco/errors.hpp"

namespace veco {

// ---- Vocabulary ---------------------------------------------------------------

Vocabulary Vocabulary::synthetic(int content_count) {
    Vocabulary v;
    v.id_to_token = {"<pad>", "<bos>", "<sep>", "<mask>", "<unk>"};
    for (int i = 0; i < content_count; ++i) {
        v.id_to_token.push_back("w" + std::to_string(FIRST_CONTENT + i));
    }
    for (size_t i = 0; i < v.id_to_token.size(); ++i) {
        v.token_to_id[v.id_to_token[i]] = static_cast<Index>(i);
    }
    return v;
}

const std::string& Vocabulary::token(Index id) const {
    if (id < 0 || id >= size()) throw DataError("token id " + std::to_string(id) + " out of range");
    return id_to_token[static_cast<size_t>(id)];
}

std::vector<Index> Vocabulary::tokenize(const std::string& line) const {
    std::vector<Index> ids;
    std::istringstream is(line);
    std::string word;
    while (is >> word) {
        auto it = token_to_id.find(word);
        ids.push_back(it == token_to_id.end() ? UNK : it->second);
    }
    return ids;
}

std::string Vocabulary::detokenize(const std::vector<Index>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += token(ids[i]);
    }
    return out;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write vocabulary file " + path);
    for (const auto& t : id_to_token) os << t << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read vocabulary file " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        v.token_to_id[line] = static_cast<Index>(v.id_to_token.size());
        v.id_to_token.push_back(line);
    }
    if (v.size() < FIRST_CONTENT) throw DataError("vocabulary file lacks the special tokens");
    return v;
}

std::vector<Index> frame_sequence(const std::vector<Index>& sentence, int max_seq_len) {
    size_t keep = std::min(sentence.size(), static_cast<size_t>(std::max(0, max_seq_len - 2)));
    std::vector<Index> framed;
    framed.reserve(keep + 2);
    framed.push_back(Vocabulary::BOS);
    framed.insert(framed.end(), sentence.begin(), sentence.begin() + static_cast<std::ptrdiff_t>(keep));
    framed.push_back(Vocabulary::SEP);
    return framed;
}

// ---- generators -----------------------------------------------------------------

PairTransform parse_transform(const std::string& name) {
    if (name == "reverse") return PairTransform::Reverse;
    if (name == "cipher" || name == "substitution-cipher") return PairTransform::SubstitutionCipher;
    if (name == "shift" || name == "shift-k") return PairTransform::ShiftK;
    throw DataError("unknown transformation '" + name + "'");
}

std::string transform_name(PairTransform t) {
    switch (t) {
        case PairTransform::Reverse: return "reverse";
        case PairTransform::SubstitutionCipher: return "cipher";
        case PairTransform::ShiftK: return "shift-k";
    }
    return "?";
}

namespace {

std::vector<Index> cipher_permutation(const GeneratorSpec& spec) {
    Index n = spec.content_hi - spec.content_lo + 1;
    std::vector<Index> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), spec.content_lo);
    Rng rng(spec.cipher_seed);
    for (Index i = n - 1; i > 0; --i) {
        Index j = uniform_int(rng, 0, i);
        std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
    }
    return perm;
}

void check_spec(const GeneratorSpec& spec) {
    if (spec.content_hi < spec.content_lo || spec.content_lo < Vocabulary::FIRST_CONTENT) {
        throw DataError("generator sub-vocabulary range is empty or overlaps special ids");
    }
    if (spec.len_lo < 1 || spec.len_hi < spec.len_lo) throw DataError("bad sentence length range");
}

/// Local-neighbor walk: next token stays near the previous one with
/// probability `locality`, giving the masked-LM terms context to learn from;
/// locality 0 yields iid sequences.
std::vector<Index> random_sentence(Rng& rng, Index lo, Index hi, int len, double locality) {
    Index span = hi - lo + 1;
    std::vector<Index> s(static_cast<size_t>(len));
    s[0] = uniform_int(rng, lo, hi);
    for (int i = 1; i < len; ++i) {
        if (uniform_real(rng, 0.0, 1.0) < locality) {
            Index step = uniform_real(rng, 0.0, 1.0) < 0.5 ? -1 : 1;
            s[static_cast<size_t>(i)] = lo + ((s[static_cast<size_t>(i - 1)] - lo + step + span) % span);
        } else {
            s[static_cast<size_t>(i)] = uniform_int(rng, lo, hi);
        }
    }
    return s;
}

}  // namespace

std::vector<Index> apply_transform(const GeneratorSpec& spec, const std::vector<Index>& src) {
    check_spec(spec);
    switch (spec.transform) {
        case PairTransform::Reverse: {
            std::vector<Index> out(src.rbegin(), src.rend());
            return out;
        }
        case PairTransform::ShiftK: {
            Index span = spec.content_hi - spec.content_lo + 1;
            std::vector<Index> out;
            out.reserve(src.size());
            for (Index id : src) {
                out.push_back(spec.content_lo + ((id - spec.content_lo + spec.shift_k) % span + span) % span);
            }
            return out;
        }
        case PairTransform::SubstitutionCipher: {
            std::vector<Index> perm = cipher_permutation(spec);
            std::vector<Index> out;
            out.reserve(src.size());
            for (Index id : src) out.push_back(perm[static_cast<size_t>(id - spec.content_lo)]);
            return out;
        }
    }
    throw DataError("unknown transformation");
}

ParallelCorpus generate_synthetic_pair_corpus(const GeneratorSpec& spec, std::uint64_t seed) {
    check_spec(spec);
    ParallelCorpus corpus;
    corpus.provenance = transform_name(spec.transform) + " seed=" + std::to_string(seed);
    Rng rng(seed);
    corpus.pairs.reserve(static_cast<size_t>(spec.num_pairs));
    for (int i = 0; i < spec.num_pairs; ++i) {
        int len = static_cast<int>(uniform_int(rng, spec.len_lo, spec.len_hi));
        SentencePair p;
        p.src = random_sentence(rng, spec.content_lo, spec.content_hi, len, spec.locality);
        p.tgt = apply_transform(spec, p.src);
        corpus.pairs.push_back(std::move(p));
    }
    return corpus;
}

MonoCorpus generate_synthetic_mono_corpus(const MonoGeneratorSpec& spec, std::uint64_t seed) {
    if (spec.content_hi < spec.content_lo) throw DataError("empty mono sub-vocabulary");
    MonoCorpus corpus;
    corpus.provenance = "mono seed=" + std::to_string(seed);
    Rng rng(seed);
    for (int d = 0; d < spec.num_documents; ++d) {
        std::vector<std::vector<Index>> doc;
        int len = static_cast<int>(uniform_int(rng, spec.len_lo, spec.len_hi));
        doc.push_back(random_sentence(rng, spec.content_lo, spec.content_hi, len, spec.locality));
        for (int s = 1; s < spec.sentences_per_document; ++s) {
            // Adjacent sentences share most of their tokens so the paired
            // context carries signal.
            std::vector<Index> next = doc.back();
            for (Index& id : next) {
                if (uniform_real(rng, 0.0, 1.0) > spec.adjacent_overlap) {
                    id = uniform_int(rng, spec.content_lo, spec.content_hi);
                }
            }
            doc.push_back(std::move(next));
        }
        corpus.documents.push_back(std::move(doc));
    }
    return corpus;
}

Index MonoCorpus::sentence_count() const {
    Index n = 0;
    for (const auto& d : documents) n += static_cast<Index>(d.size());
    return n;
}

std::vector<SentencePair> make_adjacent_pairs(const std::vector<std::vector<Index>>& document) {
    std::vector<SentencePair> pairs;
    if (document.size() < 2) return pairs;
    pairs.reserve(document.size() - 1);
    for (size_t i = 0; i + 1 < document.size(); ++i) {
        pairs.push_back(SentencePair{document[i], document[i + 1]});
    }
    return pairs;
}

std::vector<double> smoothed_language_distribution(const std::vector<double>& counts,
                                                   double alpha) {
    if (counts.empty()) throw DataError("smoothed_language_distribution: no counts");
    if (alpha < 0.0) throw DataError("smoothed_language_distribution: negative alpha");
    std::vector<double> probs(counts.size());
    double denom = 0.0;
    for (size_t i = 0; i < counts.size(); ++i) {
        if (counts[i] <= 0.0) throw DataError("smoothed_language_distribution: non-positive count");
        probs[i] = std::pow(counts[i], alpha);
        denom += probs[i];
    }
    for (double& p : probs) p /= denom;
    return probs;
}

// ---- masking ---------------------------------------------------------------------

std::vector<std::vector<Index>> MaskedBatch::token_matrix() const {
    std::vector<std::vector<Index>> m;
    m.reserve(rows.size());
    for (const auto& r : rows) {
        std::vector<Index> row = r.tokens;
        row.resize(static_cast<size_t>(padded_len), Vocabulary::PAD);
        m.push_back(std::move(row));
    }
    return m;
}

Index MaskedBatch::total_masked() const {
    Index n = 0;
    for (const auto& r : rows) n += static_cast<Index>(r.mask_positions.size());
    return n;
}

void MaskedBatch::repad() {
    padded_len = 0;
    for (const auto& r : rows) padded_len = std::max(padded_len, r.length);
}

MaskedRow apply_mask(const std::vector<Index>& tokens, double rate, Rng& rng, Index vocab_size,
                     bool use_80_10_10) {
    if (rate < 0.0 || rate > 1.0) throw DataError("mask rate must be in [0,1]");
    MaskedRow row;
    row.tokens = tokens;
    row.length = static_cast<Index>(tokens.size());

    std::vector<Index> maskable;
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= Vocabulary::FIRST_CONTENT) maskable.push_back(static_cast<Index>(i));
    }
    if (rate == 0.0 || maskable.empty()) return row;

    std::vector<Index> selected;
    for (Index pos : maskable) {
        if (uniform_real(rng, 0.0, 1.0) < rate) selected.push_back(pos);
    }
    if (selected.empty()) {
        selected.push_back(maskable[static_cast<size_t>(
            uniform_int(rng, 0, static_cast<Index>(maskable.size()) - 1))]);
    }

    for (Index pos : selected) {
        row.mask_positions.push_back(pos);
        row.targets.push_back(tokens[static_cast<size_t>(pos)]);
        if (!use_80_10_10) {
            row.tokens[static_cast<size_t>(pos)] = Vocabulary::MASK;
            continue;
        }
        double u = uniform_real(rng, 0.0, 1.0);
        if (u < 0.8) {
            row.tokens[static_cast<size_t>(pos)] = Vocabulary::MASK;
        } else if (u < 0.9) {
            row.tokens[static_cast<size_t>(pos)] =
                uniform_int(rng, Vocabulary::FIRST_CONTENT, vocab_size - 1);
        }  // else: keep the original token
    }
    return row;
}

MaskedRow make_tlm_row(const std::vector<Index>& x_tokens, const std::vector<Index>& y_tokens,
                       double rate_bilingual, Rng& rng, Index vocab_size, int max_seq_len) {
    Index budget = max_seq_len - 3;
    if (budget < 2) throw DataError("max_seq_len too small for a TLM row");
    Index lx = static_cast<Index>(x_tokens.size());
    Index ly = static_cast<Index>(y_tokens.size());
    if (lx + ly > budget) {
        Index keep_x = std::max<Index>(1, budget * lx / (lx + ly));
        keep_x = std::min(keep_x, budget - 1);
        lx = std::min(lx, keep_x);
        ly = std::min(ly, budget - lx);
    }
    std::vector<Index> concat;
    concat.reserve(static_cast<size_t>(lx + ly + 3));
    concat.push_back(Vocabulary::BOS);
    concat.insert(concat.end(), x_tokens.begin(), x_tokens.begin() + lx);
    concat.push_back(Vocabulary::SEP);
    concat.insert(concat.end(), y_tokens.begin(), y_tokens.begin() + ly);
    concat.push_back(Vocabulary::SEP);

    MaskedRow row = apply_mask(concat, rate_bilingual, rng, vocab_size);
    row.segment_boundary = 1 + lx;
    return row;
}

// ---- batch iterator -----------------------------------------------------------------

BatchIterator::BatchIterator(IteratorConfig cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed) {}

void BatchIterator::add_mono(const std::string& language, MonoCorpus corpus) {
    MonoEntry e;
    e.name = language;
    for (const auto& doc : corpus.documents) {
        auto pairs = make_adjacent_pairs(doc);
        e.adjacent.insert(e.adjacent.end(), pairs.begin(), pairs.end());
    }
    if (e.adjacent.empty()) throw DataError("monolingual corpus '" + language + "' yields no pairs");
    mono_.push_back(std::move(e));
}

void BatchIterator::add_bilingual(const std::string& name, ParallelCorpus corpus) {
    if (corpus.pairs.empty()) throw DataError("parallel corpus '" + name + "' is empty");
    BiliEntry e;
    e.name = name;
    e.corpus = std::move(corpus);
    bili_.push_back(std::move(e));
}

const SentencePair& BatchIterator::advance_mono(MonoEntry& e) {
    const SentencePair& p = e.adjacent[static_cast<size_t>(e.cursor)];
    if (++e.cursor >= static_cast<std::int64_t>(e.adjacent.size())) {
        e.cursor = 0;
        ++e.epoch;
    }
    return p;
}

const SentencePair& BatchIterator::advance_bili(BiliEntry& e) {
    const SentencePair& p = e.corpus.pairs[static_cast<size_t>(e.cursor)];
    if (++e.cursor >= static_cast<std::int64_t>(e.corpus.pairs.size())) {
        e.cursor = 0;
        ++e.epoch;
    }
    return p;
}

template <typename Entry>
Entry& BatchIterator::pick(std::vector<Entry>& entries) {
    std::vector<double> counts;
    counts.reserve(entries.size());
    for (const auto& e : entries) {
        if constexpr (std::is_same_v<Entry, MonoEntry>) {
            counts.push_back(static_cast<double>(e.adjacent.size()));
        } else {
            counts.push_back(static_cast<double>(e.corpus.pairs.size()));
        }
    }
    std::vector<double> probs = smoothed_language_distribution(counts, cfg_.alpha);
    double u = uniform_real(rng_, 0.0, 1.0);
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return entries[i];
    }
    return entries.back();
}

Batch BatchIterator::next() {
    bool mono_step = (step_ % 2 == 0);
    ++step_;
    Batch batch;
    if (mono_step) {
        if (mono_.empty()) throw DataError("no monolingual corpus registered");
        MonoEntry& e = pick(mono_);
        batch.kind = BatchKind::Mono;
        batch.language = e.name;
        for (int b = 0; b < cfg_.batch_pairs; ++b) {
            const SentencePair& p = advance_mono(e);
            batch.pair.x.rows.push_back(apply_mask(frame_sequence(p.src, cfg_.max_seq_len),
                                                   cfg_.mono_mask_rate, rng_, cfg_.vocab_size));
            batch.pair.y.rows.push_back(apply_mask(frame_sequence(p.tgt, cfg_.max_seq_len),
                                                   cfg_.mono_mask_rate, rng_, cfg_.vocab_size));
        }
    } else {
        if (bili_.empty()) throw DataError("no bilingual corpus registered");
        BiliEntry& e = pick(bili_);
        batch.kind = BatchKind::Bilingual;
        batch.language = e.name;
        for (int b = 0; b < cfg_.batch_pairs; ++b) {
            const SentencePair& p = advance_bili(e);
            batch.pair.x.rows.push_back(apply_mask(frame_sequence(p.src, cfg_.max_seq_len),
                                                   cfg_.bili_mask_rate, rng_, cfg_.vocab_size));
            batch.pair.y.rows.push_back(apply_mask(frame_sequence(p.tgt, cfg_.max_seq_len),
                                                   cfg_.bili_mask_rate, rng_, cfg_.vocab_size));
            batch.tlm.rows.push_back(make_tlm_row(p.src, p.tgt, cfg_.bili_mask_rate, rng_,
                                                  cfg_.vocab_size, cfg_.max_seq_len));
        }
        batch.tlm.repad();
    }
    batch.pair.x.repad();
    batch.pair.y.repad();
    return batch;
}

std::int64_t BatchIterator::epoch(const std::string& corpus_name) const {
    for (const auto& e : mono_) {
        if (e.name == corpus_name) return e.epoch;
    }
    for (const auto& e : bili_) {
        if (e.name == corpus_name) return e.epoch;
    }
    throw DataError("unknown corpus '" + corpus_name + "'");
}

void BatchIterator::save_state(std::ostream& os) const {
    os << "iter-state 1\n" << step_ << '\n' << serialize_rng(rng_) << '\n';
    os << mono_.size() << '\n';
    for (const auto& e : mono_) os << e.name << ' ' << e.cursor << ' ' << e.epoch << '\n';
    os << bili_.size() << '\n';
    for (const auto& e : bili_) os << e.name << ' ' << e.cursor << ' ' << e.epoch << '\n';
}

void BatchIterator::load_state(std::istream& is) {
    std::string tag;
    int version = 0;
    is >> tag >> version;
    if (tag != "iter-state" || version != 1) throw DataError("bad iterator state blob");
    is >> step_;
    is >> rng_;
    size_t n = 0;
    is >> n;
    if (n != mono_.size()) throw DataError("iterator state: mono corpus count mismatch");
    for (auto& e : mono_) {
        std::string name;
        is >> name >> e.cursor >> e.epoch;
        if (name != e.name) throw DataError("iterator state: corpus name mismatch");
    }
    is >> n;
    if (n != bili_.size()) throw DataError("iterator state: bilingual corpus count mismatch");
    for (auto& e : bili_) {
        std::string name;
        is >> name >> e.cursor >> e.epoch;
        if (name != e.name) throw DataError("iterator state: corpus name mismatch");
    }
    if (!is) throw DataError("iterator state: truncated blob");
}

// ---- corpus io -----------------------------------------------------------------------

void save_mono_corpus(const MonoCorpus& corpus, const Vocabulary& vocab, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write corpus file " + path);
    for (size_t d = 0; d < corpus.documents.size(); ++d) {
        if (d) os << '\n';
        for (const auto& s : corpus.documents[d]) os << vocab.detokenize(s) << '\n';
    }
}

MonoCorpus load_mono_corpus(const Vocabulary& vocab, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read corpus file " + path);
    MonoCorpus corpus;
    corpus.provenance = path;
    std::vector<std::vector<Index>> doc;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) {
            if (!doc.empty()) corpus.documents.push_back(std::move(doc));
            doc.clear();
            continue;
        }
        doc.push_back(vocab.tokenize(line));
    }
    if (!doc.empty()) corpus.documents.push_back(std::move(doc));
    if (corpus.documents.empty()) throw DataError("corpus file " + path + " is empty");
    return corpus;
}

void save_parallel_corpus(const ParallelCorpus& corpus, const Vocabulary& vocab,
                          const std::string& src_path, const std::string& tgt_path) {
    std::ofstream src(src_path), tgt(tgt_path);
    if (!src || !tgt) throw DataError("cannot write parallel corpus files");
    for (const auto& p : corpus.pairs) {
        src << vocab.detokenize(p.src) << '\n';
        tgt << vocab.detokenize(p.tgt) << '\n';
    }
}

ParallelCorpus load_parallel_corpus(const Vocabulary& vocab, const std::string& src_path,
                                    const std::string& tgt_path) {
    std::ifstream src(src_path), tgt(tgt_path);
    if (!src || !tgt) throw DataError("cannot read parallel corpus files");
    ParallelCorpus corpus;
    corpus.provenance = src_path + " / " + tgt_path;
    std::string sl, tl;
    while (true) {
        bool got_s = static_cast<bool>(std::getline(src, sl));
        bool got_t = static_cast<bool>(std::getline(tgt, tl));
        if (got_s != got_t) throw DataError("parallel corpus line counts differ");
        if (!got_s) break;
        SentencePair p{vocab.tokenize(sl), vocab.tokenize(tl)};
        if (p.src.empty() || p.tgt.empty()) throw DataError("parallel corpus has an empty side");
        corpus.pairs.push_back(std::move(p));
    }
    if (corpus.pairs.empty()) throw DataError("parallel corpus is empty");
    return corpus;
}

}  // namespace veco
