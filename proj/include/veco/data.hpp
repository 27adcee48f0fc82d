#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "veco/random.hpp"
#include "veco/tensor.hpp"

namespace veco {

/// Closed word-level vocabulary. Line number in the vocab file is the id.
struct Vocabulary {
    static constexpr Index PAD = 0;
    static constexpr Index BOS = 1;
    static constexpr Index SEP = 2;
    static constexpr Index MASK = 3;
    static constexpr Index UNK = 4;
    static constexpr Index FIRST_CONTENT = 5;

    std::vector<std::string> id_to_token;
    std::map<std::string, Index> token_to_id;

    /// Specials plus `content_count` word tokens "w5".."w{4+count}".
    static Vocabulary synthetic(int content_count);

    Index size() const { return static_cast<Index>(id_to_token.size()); }
    bool is_special(Index id) const { return id < FIRST_CONTENT; }
    const std::string& token(Index id) const;

    std::vector<Index> tokenize(const std::string& line) const;  // UNK for unknown words
    std::string detokenize(const std::vector<Index>& ids) const;

    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);
};

/// [BOS, sentence..., SEP], truncating the sentence to max_seq_len - 2.
std::vector<Index> frame_sequence(const std::vector<Index>& sentence, int max_seq_len);

// ---- corpora -----------------------------------------------------------------

struct SentencePair {
    std::vector<Index> src;
    std::vector<Index> tgt;
};

struct ParallelCorpus {
    std::vector<SentencePair> pairs;
    std::string provenance;
};

/// Monolingual corpus: documents of sentences, adjacency within a document.
struct MonoCorpus {
    std::vector<std::vector<std::vector<Index>>> documents;
    std::string provenance;

    Index sentence_count() const;
};

enum class PairTransform { Reverse, SubstitutionCipher, ShiftK };

PairTransform parse_transform(const std::string& name);
std::string transform_name(PairTransform t);

struct GeneratorSpec {
    PairTransform transform = PairTransform::SubstitutionCipher;
    int shift_k = 1;               // ShiftK only
    std::uint64_t cipher_seed = 1; // SubstitutionCipher only
    Index content_lo = Vocabulary::FIRST_CONTENT;
    Index content_hi = 0;  // inclusive
    int num_pairs = 0;
    int len_lo = 4;
    int len_hi = 8;
    /// Probability that a source token continues a ±1 walk instead of being
    /// drawn uniformly; 0 gives iid sequences.
    double locality = 0.8;
};

std::vector<Index> apply_transform(const GeneratorSpec& spec, const std::vector<Index>& src);

/// Deterministic synthetic pair corpus: sources are seeded random token walks
/// over [content_lo, content_hi], targets the exact transform of the source.
ParallelCorpus generate_synthetic_pair_corpus(const GeneratorSpec& spec, std::uint64_t seed);

struct MonoGeneratorSpec {
    Index content_lo = Vocabulary::FIRST_CONTENT;
    Index content_hi = 0;
    int num_documents = 0;
    int sentences_per_document = 8;
    int len_lo = 4;
    int len_hi = 8;
    double locality = 0.8;
    /// Probability a token survives into the next sentence of the document.
    double adjacent_overlap = 0.9;
};

MonoCorpus generate_synthetic_mono_corpus(const MonoGeneratorSpec& spec, std::uint64_t seed);

/// Consecutive sentence pairs (s_i, s_{i+1}); a single-sentence document
/// yields none.
std::vector<SentencePair> make_adjacent_pairs(const std::vector<std::vector<Index>>& document);

/// p_i = counts_i^alpha / sum_j counts_j^alpha.
std::vector<double> smoothed_language_distribution(const std::vector<double>& counts,
                                                   double alpha);

// ---- masking and batches -------------------------------------------------------

/// One corrupted row. Targets exist only at masked positions and are never
/// special ids; padded cells are PAD and never masked.
struct MaskedRow {
    std::vector<Index> tokens;
    std::vector<Index> mask_positions;
    std::vector<Index> targets;
    Index length = 0;
    Index segment_boundary = -1;  // index of the first SEP in TLM rows
};

struct MaskedBatch {
    std::vector<MaskedRow> rows;
    Index padded_len = 0;

    /// Padded [B, T] token matrix view.
    std::vector<std::vector<Index>> token_matrix() const;
    Index total_masked() const;
    void repad();
};

struct PairBatch {
    MaskedBatch x;
    MaskedBatch y;
};

/// 80/10/10 corruption at `rate` over non-special positions; when rate > 0
/// and the row has a maskable token, at least one position is forced masked.
/// With use_80_10_10 = false every selected position becomes MASK.
MaskedRow apply_mask(const std::vector<Index>& tokens, double rate, Rng& rng, Index vocab_size,
                     bool use_80_10_10 = true);

/// [BOS x SEP y SEP] with proportional truncation to max_seq_len, masked at
/// the bilingual rate across both halves.
MaskedRow make_tlm_row(const std::vector<Index>& x_tokens, const std::vector<Index>& y_tokens,
                       double rate_bilingual, Rng& rng, Index vocab_size, int max_seq_len);

// ---- batch iterator --------------------------------------------------------------

enum class BatchKind { Mono, Bilingual };

struct Batch {
    BatchKind kind = BatchKind::Mono;
    std::string language;
    PairBatch pair;    // CA-MLM form (both kinds)
    MaskedBatch tlm;   // TLM concatenation form (bilingual steps only)
};

struct IteratorConfig {
    int batch_pairs = 16;
    double mono_mask_rate = 0.15;
    double bili_mask_rate = 0.25;
    double alpha = 0.5;
    int max_seq_len = 64;
    Index vocab_size = 0;
};

/// Strict mono/bilingual alternation; language per batch drawn from the
/// smoothed distribution; sequential cursors with wraparound per corpus.
/// Fully deterministic from the seed, and the whole state round-trips
/// through save_state/load_state.
class BatchIterator {
public:
    BatchIterator(IteratorConfig cfg, std::uint64_t seed);

    void add_mono(const std::string& language, MonoCorpus corpus);
    void add_bilingual(const std::string& name, ParallelCorpus corpus);

    Batch next();

    std::int64_t epoch(const std::string& corpus_name) const;

    void save_state(std::ostream& os) const;
    void load_state(std::istream& is);

private:
    struct MonoEntry {
        std::string name;
        std::vector<SentencePair> adjacent;  // flattened over documents
        std::int64_t cursor = 0;
        std::int64_t epoch = 0;
    };
    struct BiliEntry {
        std::string name;
        ParallelCorpus corpus;
        std::int64_t cursor = 0;
        std::int64_t epoch = 0;
    };

    const SentencePair& advance_mono(MonoEntry& e);
    const SentencePair& advance_bili(BiliEntry& e);
    template <typename Entry>
    Entry& pick(std::vector<Entry>& entries);

    IteratorConfig cfg_;
    Rng rng_;
    std::vector<MonoEntry> mono_;
    std::vector<BiliEntry> bili_;
    std::int64_t step_ = 0;  // parity drives the alternation
};

// ---- corpus file io ----------------------------------------------------------------

/// One sentence per line; blank lines separate documents.
void save_mono_corpus(const MonoCorpus& corpus, const Vocabulary& vocab, const std::string& path);
MonoCorpus load_mono_corpus(const Vocabulary& vocab, const std::string& path);

/// Two aligned files with equal line counts.
void save_parallel_corpus(const ParallelCorpus& corpus, const Vocabulary& vocab,
                          const std::string& src_path, const std::string& tgt_path);
ParallelCorpus load_parallel_corpus(const Vocabulary& vocab, const std::string& src_path,
                                    const std::string& tgt_path);

}  // namespace veco
