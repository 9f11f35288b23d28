#include "confmoe/config.hpp"

#include <fstream>
#include <set>

#include "confmoe/error.hpp"

namespace confmoe {

using nlohmann::json;

namespace {

// Reads fields from one JSON object and rejects any key it was not asked about.
class ObjectReader {
   public:
    ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(where_ + "." + key + ": " + e.what());
        }
    }

    bool has(const char* key) const { return j_.contains(key); }
    const json& at(const char* key) {
        seen_.insert(key);
        return j_.at(key);
    }

    void finish() const {
        for (const auto& [key, _] : j_.items()) {
            if (!seen_.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
        }
    }

   private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

SynthSpec parse_synth(const json& j) {
    SynthSpec s;
    ObjectReader r(j, "synth");
    r.get("num_train", s.num_train);
    r.get("num_test", s.num_test);
    r.get("num_modalities", s.num_modalities);
    r.get("seq_len", s.seq_len);
    r.get("dim", s.dim);
    r.get("num_classes", s.num_classes);
    r.get("latent_dim", s.latent_dim);
    r.get("shared_signal_strength", s.shared_signal_strength);
    r.get("noise_std", s.noise_std);
    r.get("modality_offset", s.modality_offset);
    r.get("balanced", s.balanced);
    r.get("seed", s.seed);
    r.finish();
    s.validate();
    return s;
}

Protocol parse_protocol(const json& j) {
    ObjectReader r(j, "protocol");
    std::string kind = "random_dropout";
    r.get("kind", kind);
    Protocol p;
    if (kind == "random_dropout") {
        RandomDropout rd;
        r.get("rate", rd.rate);
        p = rd;
    } else if (kind == "natural_fixed") {
        NaturalFixed nf;
        r.get("missing_prob", nf.missing_prob);
        p = nf;
    } else if (kind == "asymmetric") {
        Asymmetric a;
        r.get("train_rate", a.train_rate);
        r.get("test_present", a.test_present);
        p = a;
    } else {
        throw ConfigError("protocol: unknown kind '" + kind + "'");
    }
    r.finish();
    return p;
}

ModelConfig parse_model(const json& j) {
    ModelConfig m;
    ObjectReader r(j, "model");
    std::string gate(to_string(m.gate)), variant(to_string(m.variant)), impute(to_string(m.impute));
    r.get("gate", gate);
    r.get("variant", variant);
    r.get("impute", impute);
    m.gate = parse_gate_kind(gate);
    m.variant = parse_variant(variant);
    m.impute = parse_impute_mode(impute);
    r.get("num_experts", m.num_experts);
    r.get("top_k", m.top_k);
    r.get("hidden_dim", m.hidden_dim);
    r.get("sparsity_b", m.sparsity_b);
    r.get("pre_impute_samples", m.pre_impute_samples);
    r.get("conf_loss_weight", m.conf_loss_weight);
    r.get("lb_loss_weight", m.lb_loss_weight);
    r.get("learning_rate", m.learning_rate);
    r.get("epochs", m.epochs);
    r.get("dropout_rate", m.dropout_rate);
    r.get("batch_size", m.batch_size);
    r.get("gate_temperature", m.gate_temperature);
    r.get("seed", m.seed);
    r.finish();
    m.validate();
    return m;
}

}  // namespace

ExperimentConfig parse_experiment_config(const json& j) {
    ExperimentConfig cfg;
    ObjectReader r(j, "config");
    if (r.has("synth")) cfg.synth = parse_synth(r.at("synth"));
    if (r.has("protocol")) cfg.protocol = parse_protocol(r.at("protocol"));
    if (r.has("model")) cfg.model = parse_model(r.at("model"));
    std::string out = cfg.output_dir.string();
    r.get("output_dir", out);
    cfg.output_dir = out;
    if (r.has("dataset_dir")) cfg.dataset_dir = r.at("dataset_dir").get<std::string>();
    r.finish();
    validate_protocol(cfg.protocol, cfg.synth.num_modalities);
    return cfg;
}

json to_json(const SynthSpec& s) {
    return json{{"num_train", s.num_train},
                {"num_test", s.num_test},
                {"num_modalities", s.num_modalities},
                {"seq_len", s.seq_len},
                {"dim", s.dim},
                {"num_classes", s.num_classes},
                {"latent_dim", s.latent_dim},
                {"shared_signal_strength", s.shared_signal_strength},
                {"noise_std", s.noise_std},
                {"modality_offset", s.modality_offset},
                {"balanced", s.balanced},
                {"seed", s.seed}};
}

json to_json(const Protocol& protocol) {
    return std::visit(
        [](const auto& p) -> json {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, NaturalFixed>) {
                return json{{"kind", "natural_fixed"}, {"missing_prob", p.missing_prob}};
            } else if constexpr (std::is_same_v<T, RandomDropout>) {
                return json{{"kind", "random_dropout"}, {"rate", p.rate}};
            } else {
                return json{{"kind", "asymmetric"}, {"train_rate", p.train_rate}, {"test_present", p.test_present}};
            }
        },
        protocol);
}

json to_json(const ModelConfig& m) {
    return json{{"gate", std::string(to_string(m.gate))},
                {"variant", std::string(to_string(m.variant))},
                {"impute", std::string(to_string(m.impute))},
                {"num_experts", m.num_experts},
                {"top_k", m.top_k},
                {"hidden_dim", m.hidden_dim},
                {"sparsity_b", m.sparsity_b},
                {"pre_impute_samples", m.pre_impute_samples},
                {"conf_loss_weight", m.conf_loss_weight},
                {"lb_loss_weight", m.lb_loss_weight},
                {"learning_rate", m.learning_rate},
                {"epochs", m.epochs},
                {"dropout_rate", m.dropout_rate},
                {"batch_size", m.batch_size},
                {"gate_temperature", m.gate_temperature},
                {"seed", m.seed}};
}

json to_json(const ExperimentConfig& cfg) {
    json j{{"synth", to_json(cfg.synth)},
           {"protocol", to_json(cfg.protocol)},
           {"model", to_json(cfg.model)},
           {"output_dir", cfg.output_dir.string()}};
    if (cfg.dataset_dir) j["dataset_dir"] = cfg.dataset_dir->string();
    return j;
}

namespace {

json read_json_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path.string());
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

}  // namespace

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    return parse_experiment_config(read_json_file(path));
}

SweepConfig parse_sweep_config(const json& j) {
    SweepConfig sw;
    ObjectReader r(j, "sweep");
    if (r.has("base")) sw.base = parse_experiment_config(r.at("base"));
    std::vector<std::string> gates{"softmax", "confnet"}, variants{"token"}, impute{"full"};
    std::vector<std::uint64_t> seeds{2023, 2024, 2025};
    r.get("gates", gates);
    r.get("variants", variants);
    r.get("impute", impute);
    r.get("seeds", seeds);
    r.finish();
    for (const auto& g : gates) sw.gates.push_back(parse_gate_kind(g));
    for (const auto& v : variants) sw.variants.push_back(parse_variant(v));
    for (const auto& m : impute) sw.impute.push_back(parse_impute_mode(m));
    sw.seeds = seeds;
    if (sw.gates.empty() || sw.variants.empty() || sw.impute.empty() || sw.seeds.empty()) {
        throw ConfigError("sweep: every axis needs at least one value");
    }
    return sw;
}

SweepConfig load_sweep_config(const std::filesystem::path& path) { return parse_sweep_config(read_json_file(path)); }

}  // namespace confmoe
