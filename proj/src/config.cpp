#include "madlab/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "madlab/errors.hpp"

namespace madlab {

namespace pt = boost::property_tree;

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string join(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

// One [section]; every key read is remembered so leftovers can be reported.
class Section {
public:
    Section(std::string name, const pt::ptree* tree) : name_(std::move(name)), tree_(tree) {}

    std::optional<std::string> raw(const std::string& key) {
        used_.insert(key);
        if (!tree_) return std::nullopt;
        const auto v = tree_->get_optional<std::string>(pt::ptree::path_type(key, '\0'));
        if (!v) return std::nullopt;
        return trim(*v);
    }

    void str(const std::string& key, std::string& out) {
        if (auto v = raw(key)) out = *v;
    }

    void real(const std::string& key, double& out) {
        if (auto v = raw(key)) out = to_double(key, *v);
    }

    void real(const std::string& key, std::optional<double>& out) {
        if (auto v = raw(key)) out = to_double(key, *v);
    }

    template <class T>
    void integer(const std::string& key, T& out) {
        if (auto v = raw(key)) out = static_cast<T>(to_u64(key, *v));
    }

    void boolean(const std::string& key, bool& out) {
        if (auto v = raw(key)) {
            if (*v == "true" || *v == "1" || *v == "yes") out = true;
            else if (*v == "false" || *v == "0" || *v == "no") out = false;
            else fail(key, *v, "expected true or false");
        }
    }

    void list(const std::string& key, std::vector<std::size_t>& out) {
        if (auto v = raw(key)) {
            out.clear();
            std::stringstream ss(*v);
            std::string item;
            while (std::getline(ss, item, ',')) out.push_back(static_cast<std::size_t>(to_u64(key, trim(item))));
        }
    }

    template <class E>
    void choice(const std::string& key, E& out, std::initializer_list<std::pair<const char*, E>> options) {
        if (auto v = raw(key)) {
            for (const auto& [name, value] : options) {
                if (*v == name) {
                    out = value;
                    return;
                }
            }
            std::string names;
            for (const auto& o : options) names += std::string(names.empty() ? "" : ", ") + o.first;
            fail(key, *v, "expected one of " + names);
        }
    }

    void finish() const {
        if (!tree_) return;
        for (const auto& [key, child] : *tree_) {
            if (!used_.count(key)) throw ConfigError("config: unknown key '" + key + "' in [" + name_ + "]");
        }
    }

private:
    [[noreturn]] void fail(const std::string& key, const std::string& value, const std::string& why) const {
        throw ConfigError("config: [" + name_ + "] " + key + " = '" + value + "': " + why);
    }

    double to_double(const std::string& key, const std::string& v) const {
        try {
            std::size_t pos = 0;
            const double d = std::stod(v, &pos);
            if (pos != v.size() || !std::isfinite(d)) fail(key, v, "not a finite number");
            return d;
        } catch (const std::logic_error&) {
            fail(key, v, "not a number");
        }
    }

    std::uint64_t to_u64(const std::string& key, const std::string& v) const {
        if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
            fail(key, v, "not a non-negative integer");
        }
        try {
            return std::stoull(v);
        } catch (const std::logic_error&) {
            fail(key, v, "integer out of range");
        }
    }

    std::string name_;
    const pt::ptree* tree_;
    std::set<std::string> used_;
};

const char* arch_name(Architecture a) { return a == Architecture::Conv ? "conv" : "mlp"; }
const char* kind_name(DataKind k) { return k == DataKind::Idx ? "idx" : (k == DataKind::Csv ? "csv" : "toy"); }

}  // namespace

RunConfig parse_config(const std::string& text) {
    pt::ptree root;
    try {
        std::istringstream in(text);
        pt::ini_parser::read_ini(in, root);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    RunConfig cfg;
    static const std::set<std::string> fixed{"run", "data", "model", "train", "loss", "analysis"};
    std::set<std::string> labels;
    for (const auto& [name, child] : root) {
        if (child.empty() && !child.data().empty()) {
            throw ConfigError("config: key '" + name + "' outside of any section");
        }
        if (name.rfind("attack:", 0) == 0) {
            AttackEntry entry;
            entry.label = trim(name.substr(7));
            if (entry.label.empty()) throw ConfigError("config: attack section without a label");
            if (!labels.insert(entry.label).second) throw ConfigError("config: duplicate attack '" + entry.label + "'");
            Section s(name, &child);
            AttackConfig& a = entry.attack;
            if (auto fam = s.raw("family")) {
                a.family = parse_attack_family(*fam);
            } else {
                throw ConfigError("config: [" + name + "] needs a family");
            }
            s.real("epsilon", a.epsilon);
            s.integer("iterations", a.iterations);
            s.real("step", a.step);
            s.real("c", a.cw.c);
            s.real("kappa", a.cw.kappa);
            s.integer("max_iterations", a.cw.max_iterations);
            s.integer("binary_search_steps", a.cw.binary_search_steps);
            s.real("cw_learning_rate", a.cw.learning_rate);
            s.real("linf_cap", a.linf_cap);
            s.real("loss_alpha", a.loss_alpha);
            s.integer("max_samples", entry.max_samples);
            s.finish();
            try {
                a.validate();
            } catch (const InvalidArgument& e) {
                throw ConfigError("config: [" + name + "] " + e.what());
            }
            cfg.attacks.push_back(std::move(entry));
        } else if (!fixed.count(name)) {
            throw ConfigError("config: unknown section [" + name + "]");
        }
    }
    auto section = [&](const char* name) {
        const auto it = root.find(name);
        return Section(name, it == root.not_found() ? nullptr : &it->second);
    };

    Section run = section("run");
    run.integer("seed", cfg.seed);
    run.str("out", cfg.out);
    run.integer("workers", cfg.workers);
    run.finish();

    Section data = section("data");
    DataConfig& d = cfg.data;
    data.choice("source", d.kind, {{"toy", DataKind::Toy}, {"idx", DataKind::Idx}, {"csv", DataKind::Csv}});
    data.choice("toy", d.toy, {{"blobs", ToyKind::Blobs}, {"moons", ToyKind::Moons}});
    data.integer("train_samples", d.train_samples);
    data.integer("test_samples", d.test_samples);
    data.real("noise", d.noise);
    data.str("train_images", d.train_images);
    data.str("train_labels", d.train_labels);
    data.str("test_images", d.test_images);
    data.str("test_labels", d.test_labels);
    data.str("train_csv", d.train_csv);
    data.str("test_csv", d.test_csv);
    data.boolean("normalize", d.normalize);
    data.integer("max_train", d.max_train);
    data.integer("max_test", d.max_test);
    data.finish();

    Section model = section("model");
    model.choice("arch", cfg.model.arch, {{"mlp", Architecture::Mlp}, {"conv", Architecture::Conv}});
    model.list("hidden", cfg.model.hidden);
    model.real("slope", cfg.model.slope);
    model.finish();

    Section train = section("train");
    TrainConfig& t = cfg.train;
    train.integer("epochs", t.epochs);
    train.integer("batch_size", t.batch_size);
    train.real("learning_rate", t.learning_rate);
    train.choice("schedule", t.schedule, {{"step", LrSchedule::Step}, {"constant", LrSchedule::Constant}});
    train.real("weight_decay", t.weight_decay);
    train.real("q", t.Q);
    train.integer("jacobian_rows", t.jacobian_rows);
    bool adversarial = false;
    train.boolean("adversarial", adversarial);
    AdversarialTraining adv;
    train.real("adv_epsilon", adv.epsilon);
    train.integer("adv_iterations", adv.iterations);
    train.real("adv_step", adv.step);
    train.real("adv_ratio", adv.ratio);
    if (adversarial) t.adversarial = adv;
    train.finish();

    Section loss = section("loss");
    MadLossConfig& l = t.loss;
    loss.real("lambda_ce", l.lambda_ce);
    loss.real("lambda_siamese", l.lambda_siamese);
    loss.real("lambda_rvl", l.lambda_rvl);
    loss.real("lambda_jacobian", l.lambda_jacobian);
    loss.real("alpha", l.alpha);
    loss.real("cosine_eps", l.cosine_eps);
    loss.choice("jacobian_target", l.jacobian_target,
                {{"embedding", JacobianTarget::Embedding}, {"logits", JacobianTarget::Logits}});
    loss.finish();

    Section analysis = section("analysis");
    AnalysisConfig& a = cfg.analysis;
    analysis.integer("margin_samples", a.margin_samples);
    analysis.boolean("separability", a.separability);
    analysis.boolean("distill", a.distill);
    analysis.integer("distill_probes", a.distill_probes);
    analysis.integer("distill_epochs", a.distill_epochs);
    analysis.choice("distill_targets", a.distill_targets, {{"soft", DistillTargets::Soft}, {"hard", DistillTargets::Hard}});
    analysis.list("proxy_hidden", a.proxy_hidden);
    analysis.str("blackbox_attack", a.blackbox_attack);
    analysis.finish();

    if (!a.blackbox_attack.empty() && !labels.count(a.blackbox_attack)) {
        throw ConfigError("config: blackbox_attack '" + a.blackbox_attack + "' names no [attack:...] section");
    }
    if (cfg.workers == 0) throw ConfigError("config: workers must be >= 1");
    try {
        t.validate();
    } catch (const InvalidArgument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& cfg) {
    std::ostringstream o;
    auto kv = [&](const char* k, const std::string& v) { o << k << " = " << v << '\n'; };
    auto kd = [&](const char* k, double v) { kv(k, fmt_double(v)); };
    auto kn = [&](const char* k, std::uint64_t v) { kv(k, std::to_string(v)); };
    auto kb = [&](const char* k, bool v) { kv(k, v ? "true" : "false"); };

    o << "[run]\n";
    kn("seed", cfg.seed);
    kv("out", cfg.out);
    kn("workers", cfg.workers);

    const DataConfig& d = cfg.data;
    o << "\n[data]\n";
    kv("source", kind_name(d.kind));
    kv("toy", d.toy == ToyKind::Moons ? "moons" : "blobs");
    kn("train_samples", d.train_samples);
    kn("test_samples", d.test_samples);
    kd("noise", d.noise);
    kv("train_images", d.train_images);
    kv("train_labels", d.train_labels);
    kv("test_images", d.test_images);
    kv("test_labels", d.test_labels);
    kv("train_csv", d.train_csv);
    kv("test_csv", d.test_csv);
    kb("normalize", d.normalize);
    kn("max_train", d.max_train);
    kn("max_test", d.max_test);

    o << "\n[model]\n";
    kv("arch", arch_name(cfg.model.arch));
    kv("hidden", join(cfg.model.hidden));
    kd("slope", cfg.model.slope);

    const TrainConfig& t = cfg.train;
    o << "\n[train]\n";
    kn("epochs", t.epochs);
    kn("batch_size", t.batch_size);
    kd("learning_rate", t.learning_rate);
    kv("schedule", t.schedule == LrSchedule::Constant ? "constant" : "step");
    kd("weight_decay", t.weight_decay);
    kd("q", t.Q);
    kn("jacobian_rows", t.jacobian_rows);
    kb("adversarial", t.adversarial.has_value());
    if (t.adversarial) {
        kd("adv_epsilon", t.adversarial->epsilon);
        kn("adv_iterations", t.adversarial->iterations);
        if (t.adversarial->step) kd("adv_step", *t.adversarial->step);
        kd("adv_ratio", t.adversarial->ratio);
    }

    const MadLossConfig& l = t.loss;
    o << "\n[loss]\n";
    kd("lambda_ce", l.lambda_ce);
    kd("lambda_siamese", l.lambda_siamese);
    kd("lambda_rvl", l.lambda_rvl);
    kd("lambda_jacobian", l.lambda_jacobian);
    kd("alpha", l.alpha);
    kd("cosine_eps", l.cosine_eps);
    kv("jacobian_target", l.jacobian_target == JacobianTarget::Logits ? "logits" : "embedding");

    for (const AttackEntry& e : cfg.attacks) {
        const AttackConfig& a = e.attack;
        o << "\n[attack:" << e.label << "]\n";
        kv("family", to_string(a.family));
        kd("epsilon", a.epsilon);
        kn("iterations", a.iterations);
        if (a.step) kd("step", *a.step);
        kd("c", a.cw.c);
        kd("kappa", a.cw.kappa);
        kn("max_iterations", a.cw.max_iterations);
        kn("binary_search_steps", a.cw.binary_search_steps);
        kd("cw_learning_rate", a.cw.learning_rate);
        if (a.linf_cap) kd("linf_cap", *a.linf_cap);
        kd("loss_alpha", a.loss_alpha);
        kn("max_samples", e.max_samples);
    }

    const AnalysisConfig& a = cfg.analysis;
    o << "\n[analysis]\n";
    kn("margin_samples", a.margin_samples);
    kb("separability", a.separability);
    kb("distill", a.distill);
    kn("distill_probes", a.distill_probes);
    kn("distill_epochs", a.distill_epochs);
    kv("distill_targets", a.distill_targets == DistillTargets::Hard ? "hard" : "soft");
    kv("proxy_hidden", join(a.proxy_hidden));
    kv("blackbox_attack", a.blackbox_attack);
    return o.str();
}

std::uint64_t RunSeeds::attack(std::size_t k) const { return derive_seed(base, 100 + k); }

RunSeeds run_seeds(std::uint64_t seed) {
    return {derive_seed(seed, 1), derive_seed(seed, 2), derive_seed(seed, 3), derive_seed(seed, 4), seed};
}

namespace {

Dataset keep(Dataset d, std::size_t max_rows) { return max_rows == 0 ? d : d.slice(0, max_rows); }

}  // namespace

Splits load_data(const DataConfig& cfg, std::uint64_t seed) {
    Splits s;
    switch (cfg.kind) {
        case DataKind::Toy:
            s.train = make_toy_dataset(cfg.toy, cfg.train_samples, cfg.noise, derive_seed(seed, 1));
            s.test = make_toy_dataset(cfg.toy, cfg.test_samples, cfg.noise, derive_seed(seed, 2));
            break;
        case DataKind::Idx:
            s.train = load_idx(cfg.train_images, cfg.train_labels);
            s.test = load_idx(cfg.test_images, cfg.test_labels);
            break;
        case DataKind::Csv: {
            CsvSchema schema;
            schema.normalize = cfg.normalize;
            s.train = load_csv(cfg.train_csv, schema);
            schema.num_classes = s.train.num_classes;
            s.test = load_csv(cfg.test_csv, schema);
            break;
        }
    }
    s.train = keep(std::move(s.train), cfg.max_train);
    s.test = keep(std::move(s.test), cfg.max_test);
    const std::size_t m = std::max(s.train.num_classes, s.test.num_classes);
    s.train.num_classes = s.test.num_classes = m;
    if (s.train.sample_size() != s.test.sample_size()) {
        throw DataError(DataError::Kind::CountMismatch, "data: train and test samples differ in size");
    }
    s.train.validate();
    s.test.validate();
    return s;
}

ModelSpec build_model_spec(const ModelConfig& cfg, const Shape& sample_shape, std::size_t num_classes) {
    const std::size_t n = shape_numel(sample_shape);
    if (cfg.arch == Architecture::Mlp) {
        if (cfg.hidden.empty()) throw ConfigError("config: mlp needs at least one hidden layer");
        return mlp_spec(n, cfg.hidden, num_classes, cfg.slope);
    }
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    if (side * side != n || side < 4) {
        throw ConfigError("config: conv architecture needs square images, got " + shape_str(sample_shape));
    }
    return small_convnet_spec(side, num_classes, cfg.slope);
}

}  // namespace madlab
