#include <charconv>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <toml.hpp>

#include "encofa/trainer.hpp"

namespace encofa {

namespace {

const std::map<std::string, std::set<std::string>, std::less<>>& schema() {
    static const std::map<std::string, std::set<std::string>, std::less<>> s = {
        {"run", {"seed", "epochs", "method", "triage", "output_dir", "save_checkpoints"}},
        {"data",
         {"source", "path", "seed", "n_per_class", "num_classes", "num_ood_classes", "dim", "separation", "id_classes",
          "ood_classes", "channels", "height", "width"}},
        {"noise", {"alpha", "beta", "instance_profile"}},
        {"model", {"family", "feature_dim", "projection_dim", "hidden"}},
        {"optim", {"lr", "weight_decay", "batch_size", "power", "beta1", "beta2", "eps"}},
        {"encofa",
         {"gamma_cl", "gamma_ood", "gamma_gen", "gamma_p", "lambda", "tau", "knn_k", "knn_divisor", "warmup_epochs",
          "importance_scope", "gmm_restarts"}},
        {"augment", {"enabled", "jitter_scale", "max_rotation_degrees", "horizontal_flip", "train_inputs"}},
    };
    return s;
}

class Section {
public:
    Section(const toml::table* table, std::string name) : table_(table), name_(std::move(name)) {}

    void number(const char* key, double& out) const {
        if (const auto* node = find(key)) {
            if (auto v = node->value<double>()) {
                out = *v;
            } else {
                fail(key, "expected a number");
            }
        }
    }

    template <typename Int>
    void integer(const char* key, Int& out) const {
        if (const auto* node = find(key)) {
            const auto* v = node->as_integer();
            if (!v) fail(key, "expected an integer");
            const std::int64_t raw = v->get();
            if (raw < static_cast<std::int64_t>(std::numeric_limits<Int>::min()) ||
                static_cast<std::uint64_t>(raw) > static_cast<std::uint64_t>(std::numeric_limits<Int>::max()))
                fail(key, "integer out of range");
            out = static_cast<Int>(raw);
        }
    }

    void boolean(const char* key, bool& out) const {
        if (const auto* node = find(key)) {
            const auto* v = node->as_boolean();
            if (!v) fail(key, "expected true or false");
            out = v->get();
        }
    }

    bool string(const char* key, std::string& out) const {
        if (const auto* node = find(key)) {
            const auto* v = node->as_string();
            if (!v) fail(key, "expected a string");
            out = v->get();
            return true;
        }
        return false;
    }

    void strings(const char* key, std::vector<std::string>& out) const {
        if (const auto* node = find(key)) {
            const auto* arr = node->as_array();
            if (!arr) fail(key, "expected an array of strings");
            out.clear();
            for (const auto& item : *arr) {
                const auto* v = item.as_string();
                if (!v) fail(key, "expected an array of strings");
                out.push_back(v->get());
            }
        }
    }

    void integers(const char* key, std::vector<int>& out) const {
        if (const auto* node = find(key)) {
            const auto* arr = node->as_array();
            if (!arr) fail(key, "expected an array of integers");
            out.clear();
            for (const auto& item : *arr) {
                const auto* v = item.as_integer();
                if (!v) fail(key, "expected an array of integers");
                out.push_back(static_cast<int>(v->get()));
            }
        }
    }

    template <typename Enum, typename Parse>
    void choice(const char* key, Enum& out, Parse parse) const {
        std::string text;
        if (!string(key, text)) return;
        try {
            out = parse(text);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            fail(key, e.what());
        }
    }

    [[noreturn]] void fail(const char* key, const std::string& what) const { throw ConfigError(name_ + "." + key, what); }

private:
    const toml::node* find(const char* key) const { return table_ ? table_->get(key) : nullptr; }

    const toml::table* table_;
    std::string name_;
};

TriageMode parse_triage(std::string_view t) {
    if (t == "auto") return TriageMode::automatic;
    if (t == "all_clean") return TriageMode::all_clean;
    throw ConfigError("run.triage", "expected auto or all_clean");
}

ImportanceScope parse_scope(std::string_view t) {
    if (t == "all") return ImportanceScope::all;
    if (t == "open_set") return ImportanceScope::open_set;
    throw ConfigError("encofa.importance_scope", "expected all or open_set");
}

DataSource parse_source(std::string_view t) {
    if (t == "blobs") return DataSource::blobs;
    if (t == "saved") return DataSource::saved;
    if (t == "images") return DataSource::images;
    throw ConfigError("data.source", "expected blobs, saved or images");
}

std::string_view to_string(TriageMode m) { return m == TriageMode::automatic ? "auto" : "all_clean"; }
std::string_view to_string(ImportanceScope s) { return s == ImportanceScope::all ? "all" : "open_set"; }
std::string_view to_string(DataSource s) {
    switch (s) {
        case DataSource::blobs: return "blobs";
        case DataSource::saved: return "saved";
        case DataSource::images: return "images";
    }
    return "blobs";
}

std::string num(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    std::string s(buf, end);
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

std::string toml_string(std::string_view s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        out += c;
    }
    return out + '"';
}

template <typename T>
std::string list(const std::vector<T>& items) {
    std::string out = "[";
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += ", ";
        if constexpr (std::is_same_v<T, std::string>) {
            out += toml_string(items[i]);
        } else {
            out += std::to_string(items[i]);
        }
    }
    return out + "]";
}

}  // namespace

std::string_view to_string(Method method) {
    switch (method) {
        case Method::ce: return "ce";
        case Method::cls_cl_cn: return "cls_cl_cn";
        case Method::cls: return "cls";
        case Method::cls_ensc: return "cls_ensc";
        case Method::encofa: return "encofa";
    }
    return "encofa";
}

Method parse_method(std::string_view t) {
    for (Method m : {Method::ce, Method::cls_cl_cn, Method::cls, Method::cls_ensc, Method::encofa})
        if (to_string(m) == t) return m;
    throw ConfigError("run.method", "expected ce, cls_cl_cn, cls, cls_ensc or encofa");
}

RunConfig parse_config(std::string_view text, const std::string& source_name) {
    toml::table root;
    try {
        root = toml::parse(text, source_name);
    } catch (const toml::parse_error& e) {
        std::ostringstream msg;
        msg << e.description() << " at line " << e.source().begin.line;
        throw ConfigError("<syntax>", msg.str());
    }
    for (const auto& [key, node] : root) {
        const auto it = schema().find(key.str());
        if (it == schema().end()) throw ConfigError(std::string(key.str()), "unknown section");
        const auto* table = node.as_table();
        if (!table) throw ConfigError(std::string(key.str()), "expected a table");
        for (const auto& [sub, _] : *table)
            if (!it->second.contains(std::string(sub.str())))
                throw ConfigError(std::string(key.str()) + "." + std::string(sub.str()), "unknown key");
    }
    auto section = [&](const char* name) { return Section(root[name].as_table(), name); };

    RunConfig c;
    const auto run = section("run");
    run.integer("seed", c.seed);
    run.integer("epochs", c.epochs);
    run.choice("method", c.method, parse_method);
    run.choice("triage", c.triage, parse_triage);
    std::string out_dir;
    if (run.string("output_dir", out_dir)) c.output_dir = out_dir;
    run.boolean("save_checkpoints", c.save_checkpoints);

    const auto data = section("data");
    data.choice("source", c.data.source, parse_source);
    std::string path;
    if (data.string("path", path)) c.data.path = path;
    std::uint64_t data_seed = 0;
    if (root["data"]["seed"]) {
        data.integer("seed", data_seed);
        c.data_seed = data_seed;
    }
    data.integer("n_per_class", c.data.blobs.n_per_class);
    data.integer("num_classes", c.data.blobs.num_classes);
    data.integer("num_ood_classes", c.data.blobs.num_ood_classes);
    data.integer("dim", c.data.blobs.dim);
    data.number("separation", c.data.blobs.separation);
    data.strings("id_classes", c.data.id_classes);
    data.strings("ood_classes", c.data.ood_classes);
    data.integer("channels", c.data.image.channels);
    data.integer("height", c.data.image.height);
    data.integer("width", c.data.image.width);

    const auto noise = section("noise");
    noise.number("alpha", c.alpha);
    noise.number("beta", c.beta);
    noise.choice("instance_profile", c.profile, parse_instance_profile);

    const auto model = section("model");
    model.choice("family", c.model.family, parse_backbone_family);
    model.integer("feature_dim", c.model.feature_dim);
    model.integer("projection_dim", c.model.projection_dim);
    model.integers("hidden", c.model.hidden);

    const auto optim = section("optim");
    optim.number("lr", c.optim.lr);
    optim.number("weight_decay", c.optim.weight_decay);
    optim.integer("batch_size", c.optim.batch_size);
    optim.number("power", c.optim.power);
    optim.number("beta1", c.optim.beta1);
    optim.number("beta2", c.optim.beta2);
    optim.number("eps", c.optim.eps);

    const auto enc = section("encofa");
    enc.number("gamma_cl", c.hp.gamma_cl);
    enc.number("gamma_ood", c.hp.gamma_ood);
    enc.number("gamma_gen", c.hp.gamma_gen);
    enc.number("gamma_p", c.hp.gamma_p);
    enc.number("lambda", c.hp.lambda);
    enc.number("tau", c.hp.tau);
    enc.integer("knn_k", c.hp.knn_k);
    enc.integer("knn_divisor", c.knn_divisor);
    enc.integer("warmup_epochs", c.hp.warmup_epochs);
    enc.choice("importance_scope", c.importance_scope, parse_scope);
    enc.integer("gmm_restarts", c.gmm_restarts);

    const auto aug = section("augment");
    aug.boolean("enabled", c.augment.enabled);
    aug.number("jitter_scale", c.augment.jitter_scale);
    aug.number("max_rotation_degrees", c.augment.max_rotation_degrees);
    aug.boolean("horizontal_flip", c.augment.horizontal_flip);
    aug.boolean("train_inputs", c.augment_train_inputs);

    c.validate();
    return c;
}

RunConfig load_config(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("<file>", "cannot read " + file.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str(), file.string());
}

void RunConfig::validate() const {
    if (epochs < 1) throw ConfigError("run.epochs", "must be >= 1");
    hp.validate();
    if (hp.warmup_epochs >= epochs) throw ConfigError("encofa.warmup_epochs", "must be smaller than run.epochs");
    if (!(optim.lr > 0.0)) throw ConfigError("optim.lr", "must be > 0");
    if (!(optim.weight_decay >= 0.0)) throw ConfigError("optim.weight_decay", "must be >= 0");
    if (optim.batch_size < 1) throw ConfigError("optim.batch_size", "must be >= 1");
    if (!(optim.power > 0.0)) throw ConfigError("optim.power", "must be > 0");
    if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0)) throw ConfigError("optim.beta1", "must be in [0, 1)");
    if (!(optim.beta2 >= 0.0 && optim.beta2 < 1.0)) throw ConfigError("optim.beta2", "must be in [0, 1)");
    if (!(optim.eps > 0.0)) throw ConfigError("optim.eps", "must be > 0");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("noise.alpha", "must be in [0, 1]");
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("noise.beta", "must be in [0, 1]");
    if (model.feature_dim < 1) throw ConfigError("model.feature_dim", "must be >= 1");
    if (model.projection_dim < 1) throw ConfigError("model.projection_dim", "must be >= 1");
    for (int h : model.hidden)
        if (h < 1) throw ConfigError("model.hidden", "widths must be >= 1");
    if (knn_divisor < 0) throw ConfigError("encofa.knn_divisor", "must be >= 0");
    if (gmm_restarts < 1) throw ConfigError("encofa.gmm_restarts", "must be >= 1");
    if (!(augment.jitter_scale >= 0.0)) throw ConfigError("augment.jitter_scale", "must be >= 0");
    if (!(augment.max_rotation_degrees >= 0.0)) throw ConfigError("augment.max_rotation_degrees", "must be >= 0");
    if (data.source != DataSource::blobs && data.path.empty()) throw ConfigError("data.path", "required for this source");
    if (data.source == DataSource::images && data.id_classes.size() < 2)
        throw ConfigError("data.id_classes", "at least 2 ID classes are required");
}

std::string config_to_toml(const RunConfig& c) {
    std::ostringstream o;
    o << "[run]\n"
      << "seed = " << c.seed << "\n"
      << "epochs = " << c.epochs << "\n"
      << "method = " << toml_string(to_string(c.method)) << "\n"
      << "triage = " << toml_string(to_string(c.triage)) << "\n"
      << "output_dir = " << toml_string(c.output_dir.generic_string()) << "\n"
      << "save_checkpoints = " << (c.save_checkpoints ? "true" : "false") << "\n\n";
    o << "[data]\n"
      << "source = " << toml_string(to_string(c.data.source)) << "\n";
    if (!c.data.path.empty()) o << "path = " << toml_string(c.data.path.generic_string()) << "\n";
    if (c.data_seed) o << "seed = " << *c.data_seed << "\n";
    o << "n_per_class = " << c.data.blobs.n_per_class << "\n"
      << "num_classes = " << c.data.blobs.num_classes << "\n"
      << "num_ood_classes = " << c.data.blobs.num_ood_classes << "\n"
      << "dim = " << c.data.blobs.dim << "\n"
      << "separation = " << num(c.data.blobs.separation) << "\n"
      << "id_classes = " << list(c.data.id_classes) << "\n"
      << "ood_classes = " << list(c.data.ood_classes) << "\n"
      << "channels = " << c.data.image.channels << "\n"
      << "height = " << c.data.image.height << "\n"
      << "width = " << c.data.image.width << "\n\n";
    o << "[noise]\n"
      << "alpha = " << num(c.alpha) << "\n"
      << "beta = " << num(c.beta) << "\n"
      << "instance_profile = " << toml_string(to_string(c.profile)) << "\n\n";
    o << "[model]\n"
      << "family = " << toml_string(to_string(c.model.family)) << "\n"
      << "feature_dim = " << c.model.feature_dim << "\n"
      << "projection_dim = " << c.model.projection_dim << "\n"
      << "hidden = " << list(c.model.hidden) << "\n\n";
    o << "[optim]\n"
      << "lr = " << num(c.optim.lr) << "\n"
      << "weight_decay = " << num(c.optim.weight_decay) << "\n"
      << "batch_size = " << c.optim.batch_size << "\n"
      << "power = " << num(c.optim.power) << "\n"
      << "beta1 = " << num(c.optim.beta1) << "\n"
      << "beta2 = " << num(c.optim.beta2) << "\n"
      << "eps = " << num(c.optim.eps) << "\n\n";
    o << "[encofa]\n"
      << "gamma_cl = " << num(c.hp.gamma_cl) << "\n"
      << "gamma_ood = " << num(c.hp.gamma_ood) << "\n"
      << "gamma_gen = " << num(c.hp.gamma_gen) << "\n"
      << "gamma_p = " << num(c.hp.gamma_p) << "\n"
      << "lambda = " << num(c.hp.lambda) << "\n"
      << "tau = " << num(c.hp.tau) << "\n"
      << "knn_k = " << c.hp.knn_k << "\n"
      << "knn_divisor = " << c.knn_divisor << "\n"
      << "warmup_epochs = " << c.hp.warmup_epochs << "\n"
      << "importance_scope = " << toml_string(to_string(c.importance_scope)) << "\n"
      << "gmm_restarts = " << c.gmm_restarts << "\n\n";
    o << "[augment]\n"
      << "enabled = " << (c.augment.enabled ? "true" : "false") << "\n"
      << "jitter_scale = " << num(c.augment.jitter_scale) << "\n"
      << "max_rotation_degrees = " << num(c.augment.max_rotation_degrees) << "\n"
      << "horizontal_flip = " << (c.augment.horizontal_flip ? "true" : "false") << "\n"
      << "train_inputs = " << (c.augment_train_inputs ? "true" : "false") << "\n";
    return o.str();
}

}  // namespace encofa
