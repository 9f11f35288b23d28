#pragma once
// Seeded synthetic multimodal classification data and the missingness
// protocols applied to it.

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "confmoe/matrix.hpp"

namespace confmoe {

struct SynthSpec {
    std::size_t num_train = 2000;
    std::size_t num_test = 500;
    std::size_t num_modalities = 3;
    std::size_t seq_len = 8;
    std::size_t dim = 32;
    std::size_t num_classes = 3;
    std::size_t latent_dim = 8;
    // Weight of the cross-modal (shared) class latent against the per-modality one.
    double shared_signal_strength = 0.5;
    // Std of per-instance latent jitter and of per-token noise.
    double noise_std = 1.0;
    // Scale of the per-modality offsets that separate modalities.
    double modality_offset = 2.0;
    bool balanced = true;
    std::uint64_t seed = 2023;

    void validate() const;
};

// One instance: |M| token sequences (s x dim) and which of them are observed.
struct ModalityBatch {
    std::vector<DenseMatrix> modalities;
    std::vector<std::uint8_t> observed;  // 1 = present

    std::size_t num_observed() const;
};

struct Dataset {
    std::vector<ModalityBatch> instances;
    std::vector<std::size_t> labels;

    std::size_t size() const { return instances.size(); }
};

struct SyntheticData {
    Dataset train;
    Dataset test;
};

SyntheticData generate(const SynthSpec& spec);

struct NaturalFixed {
    Vector missing_prob;  // one per modality
};
struct RandomDropout {
    double rate = 0.0;
};
struct Asymmetric {
    double train_rate = 0.5;
    std::vector<std::size_t> test_present;
};
using Protocol = std::variant<NaturalFixed, RandomDropout, Asymmetric>;

enum class Split { Train, Test };
std::string_view to_string(Split split);

void validate_protocol(const Protocol& protocol, std::size_t num_modalities);

// Returns a copy with fresh masks. Masks depend only on (protocol, split,
// seed, instance index) and never leave an instance with zero modalities.
Dataset apply_protocol(const Dataset& data, const Protocol& protocol, Split split, std::uint64_t seed);

// Fraction of instances missing each modality.
Vector missing_rates(const Dataset& data);

// Directory layout: meta.json, data.csv, labels.csv, mask.csv.
void save_dataset(const Dataset& data, const std::filesystem::path& dir, const std::string& meta_json);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace confmoe
