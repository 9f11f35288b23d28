#include "confmoe/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "confmoe/error.hpp"
#include "confmoe/format.hpp"
#include "confmoe/rng.hpp"

namespace confmoe {

void SynthSpec::validate() const {
    if (num_classes < 2) throw ConfigError("synth: need at least 2 classes");
    if (num_modalities < 2) throw ConfigError("synth: need at least 2 modalities");
    if (seq_len == 0 || dim == 0 || latent_dim == 0) throw ConfigError("synth: seq_len, dim and latent_dim must be positive");
    if (num_train == 0) throw ConfigError("synth: num_train must be positive");
    if (!(shared_signal_strength >= 0.0 && shared_signal_strength <= 1.0)) {
        throw ConfigError("synth: shared_signal_strength must lie in [0, 1]");
    }
    if (!(noise_std >= 0.0)) throw ConfigError("synth: noise_std must be nonnegative");
    if (!(modality_offset >= 0.0)) throw ConfigError("synth: modality_offset must be nonnegative");
}

std::size_t ModalityBatch::num_observed() const {
    return static_cast<std::size_t>(std::count(observed.begin(), observed.end(), std::uint8_t{1}));
}

namespace {

DenseMatrix gaussian(std::size_t rows, std::size_t cols, double std_dev, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    DenseMatrix m(rows, cols);
    for (double& v : m.flat()) v = std_dev * n(rng);
    return m;
}

// Parameters of the generative model; drawn once per seed and shared by the
// train and test splits.
struct World {
    DenseMatrix shared_proto;                // C x r
    std::vector<DenseMatrix> private_proto;  // |M| x (C x r)
    std::vector<DenseMatrix> shared_view;    // |M| x (r x d)
    std::vector<DenseMatrix> private_view;   // |M| x (r x d)
    std::vector<DenseMatrix> offset;         // |M| x (s x d)
};

World make_world(const SynthSpec& spec) {
    auto rng = make_rng(spec.seed, {0x574f524cULL});
    const double view_std = 1.0 / std::sqrt(static_cast<double>(spec.latent_dim));
    World w;
    w.shared_proto = gaussian(spec.num_classes, spec.latent_dim, 1.0, rng);
    for (std::size_t m = 0; m < spec.num_modalities; ++m) {
        w.private_proto.push_back(gaussian(spec.num_classes, spec.latent_dim, 1.0, rng));
        w.shared_view.push_back(gaussian(spec.latent_dim, spec.dim, view_std, rng));
        w.private_view.push_back(gaussian(spec.latent_dim, spec.dim, view_std, rng));
        // modality-level shift plus a smaller per-position pattern
        DenseMatrix base = gaussian(1, spec.dim, spec.modality_offset, rng);
        DenseMatrix off = gaussian(spec.seq_len, spec.dim, 0.25 * spec.modality_offset, rng);
        for (std::size_t t = 0; t < spec.seq_len; ++t)
            for (std::size_t c = 0; c < spec.dim; ++c) off(t, c) += base(0, c);
        w.offset.push_back(std::move(off));
    }
    return w;
}

Vector jittered(std::span<const double> proto, double std_dev, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Vector z(proto.begin(), proto.end());
    for (double& v : z) v += std_dev * n(rng);
    return z;
}

Dataset make_split(const SynthSpec& spec, const World& w, std::size_t count, std::uint64_t split_tag) {
    Dataset data;
    data.instances.reserve(count);
    data.labels.reserve(count);

    auto label_rng = make_rng(spec.seed, {split_tag, 0x4c4142ULL});
    std::vector<std::size_t> labels(count);
    if (spec.balanced) {
        for (std::size_t i = 0; i < count; ++i) labels[i] = i % spec.num_classes;
        std::shuffle(labels.begin(), labels.end(), label_rng);
    } else {
        std::uniform_int_distribution<std::size_t> pick(0, spec.num_classes - 1);
        for (auto& l : labels) l = pick(label_rng);
    }

    const double alpha = spec.shared_signal_strength;
    std::normal_distribution<double> n(0.0, 1.0);
    for (std::size_t i = 0; i < count; ++i) {
        auto rng = make_rng(spec.seed, {split_tag, i});
        const std::size_t c = labels[i];
        const Vector z = jittered(w.shared_proto.row(c), spec.noise_std, rng);
        ModalityBatch inst;
        inst.observed.assign(spec.num_modalities, 1);
        for (std::size_t m = 0; m < spec.num_modalities; ++m) {
            const Vector zm = jittered(w.private_proto[m].row(c), spec.noise_std, rng);
            const Vector shared = vecmat(z, w.shared_view[m]);
            const Vector priv = vecmat(zm, w.private_view[m]);
            DenseMatrix x(spec.seq_len, spec.dim);
            for (std::size_t t = 0; t < spec.seq_len; ++t)
                for (std::size_t d = 0; d < spec.dim; ++d) {
                    x(t, d) = alpha * shared[d] + (1.0 - alpha) * priv[d] + w.offset[m](t, d) +
                              spec.noise_std * n(rng);
                }
            inst.modalities.push_back(std::move(x));
        }
        data.instances.push_back(std::move(inst));
        data.labels.push_back(c);
    }
    return data;
}

}  // namespace

SyntheticData generate(const SynthSpec& spec) {
    spec.validate();
    const World w = make_world(spec);
    return {make_split(spec, w, spec.num_train, 1), make_split(spec, w, spec.num_test, 2)};
}

std::string_view to_string(Split split) { return split == Split::Train ? "train" : "test"; }

void validate_protocol(const Protocol& protocol, std::size_t num_modalities) {
    std::visit(
        [&](const auto& p) {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, NaturalFixed>) {
                if (p.missing_prob.size() != num_modalities) {
                    throw ConfigError("natural_fixed: need one missing probability per modality");
                }
                for (double q : p.missing_prob)
                    if (!(q >= 0.0 && q < 1.0)) throw ConfigError("natural_fixed: probabilities must lie in [0, 1)");
            } else if constexpr (std::is_same_v<T, RandomDropout>) {
                if (!(p.rate >= 0.0 && p.rate < 1.0)) throw ConfigError("random_dropout: rate must lie in [0, 1)");
            } else {
                if (!(p.train_rate >= 0.0 && p.train_rate < 1.0)) {
                    throw ConfigError("asymmetric: train_rate must lie in [0, 1)");
                }
                if (p.test_present.empty()) throw ConfigError("asymmetric: test_present set is empty");
                for (auto m : p.test_present)
                    if (m >= num_modalities) throw ConfigError("asymmetric: test_present index out of range");
            }
        },
        protocol);
}

namespace {

// Independent per-modality drops, redrawn until at least one survives.
std::vector<std::uint8_t> draw_mask(std::span<const double> drop_prob, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<std::uint8_t> mask(drop_prob.size());
    do {
        for (std::size_t m = 0; m < mask.size(); ++m) mask[m] = u(rng) < drop_prob[m] ? 0 : 1;
    } while (std::count(mask.begin(), mask.end(), std::uint8_t{1}) == 0);
    return mask;
}

}  // namespace

Dataset apply_protocol(const Dataset& data, const Protocol& protocol, Split split, std::uint64_t seed) {
    const std::size_t num_modalities = data.instances.empty() ? 0 : data.instances.front().modalities.size();
    if (num_modalities > 0) validate_protocol(protocol, num_modalities);
    Dataset out = data;
    const std::uint64_t split_tag = split == Split::Train ? 11 : 12;
    for (std::size_t i = 0; i < out.instances.size(); ++i) {
        auto rng = make_rng(seed, {0x4d41534bULL, split_tag, i});
        auto& mask = out.instances[i].observed;
        std::visit(
            [&](const auto& p) {
                using T = std::decay_t<decltype(p)>;
                if constexpr (std::is_same_v<T, NaturalFixed>) {
                    mask = draw_mask(p.missing_prob, rng);
                } else if constexpr (std::is_same_v<T, RandomDropout>) {
                    mask = draw_mask(Vector(num_modalities, p.rate), rng);
                } else if (split == Split::Train) {
                    mask = draw_mask(Vector(num_modalities, p.train_rate), rng);
                } else {
                    mask.assign(num_modalities, 0);
                    for (auto m : p.test_present) mask[m] = 1;
                }
            },
            protocol);
    }
    return out;
}

Vector missing_rates(const Dataset& data) {
    if (data.instances.empty()) return {};
    Vector rates(data.instances.front().observed.size(), 0.0);
    for (const auto& inst : data.instances)
        for (std::size_t m = 0; m < rates.size(); ++m) rates[m] += inst.observed[m] ? 0.0 : 1.0;
    for (double& r : rates) r /= static_cast<double>(data.instances.size());
    return rates;
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir, const std::string& meta_json) {
    std::filesystem::create_directories(dir);
    const auto open = [&](const char* name) {
        std::ofstream f(dir / name, std::ios::binary);
        if (!f) throw Error("cannot write " + (dir / name).string());
        return f;
    };
    {
        auto f = open("meta.json");
        f << meta_json << '\n';
    }
    auto fd = open("data.csv");
    auto fl = open("labels.csv");
    auto fm = open("mask.csv");
    fd << "instance_id,modality_id,token_idx,dim_idx,value\n";
    fl << "instance_id,label\n";
    fm << "instance_id,modality_id,observed\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& inst = data.instances[i];
        fl << i << ',' << data.labels[i] << '\n';
        for (std::size_t m = 0; m < inst.modalities.size(); ++m) {
            fm << i << ',' << m << ',' << int(inst.observed[m]) << '\n';
            const DenseMatrix& x = inst.modalities[m];
            for (std::size_t t = 0; t < x.rows(); ++t)
                for (std::size_t c = 0; c < x.cols(); ++c)
                    fd << i << ',' << m << ',' << t << ',' << c << ',' << format_real(x(t, c)) << '\n';
        }
    }
    if (!fd || !fl || !fm) throw Error("failed writing dataset to " + dir.string());
}

namespace {

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot read " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(std::move(cells));
    }
    return rows;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& dir) {
    const auto labels = read_csv(dir / "labels.csv");
    const auto masks = read_csv(dir / "mask.csv");
    const auto values = read_csv(dir / "data.csv");
    Dataset data;
    data.labels.resize(labels.size());
    data.instances.resize(labels.size());
    for (const auto& r : labels) data.labels.at(std::stoul(r.at(0))) = std::stoul(r.at(1));

    std::size_t num_modalities = 0, seq_len = 0, dim = 0;
    for (const auto& r : values) {
        num_modalities = std::max<std::size_t>(num_modalities, std::stoul(r.at(1)) + 1);
        seq_len = std::max<std::size_t>(seq_len, std::stoul(r.at(2)) + 1);
        dim = std::max<std::size_t>(dim, std::stoul(r.at(3)) + 1);
    }
    for (auto& inst : data.instances) {
        inst.modalities.assign(num_modalities, DenseMatrix(seq_len, dim));
        inst.observed.assign(num_modalities, 1);
    }
    for (const auto& r : values) {
        data.instances.at(std::stoul(r.at(0))).modalities.at(std::stoul(r.at(1)))(std::stoul(r.at(2)),
                                                                                   std::stoul(r.at(3))) =
            std::stod(r.at(4));
    }
    for (const auto& r : masks) {
        data.instances.at(std::stoul(r.at(0))).observed.at(std::stoul(r.at(1))) =
            static_cast<std::uint8_t>(std::stoi(r.at(2)));
    }
    return data;
}

}  // namespace confmoe
