#include "madlab/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>

namespace madlab {

namespace fs = std::filesystem;

void run_stage(const std::string& stage, const std::function<void()>& body) {
    using C = StageError::Category;
    try {
        body();
    } catch (const StageError&) {
        throw;
    } catch (const ConfigError& e) {
        throw StageError(stage, e.what(), C::Usage);
    } catch (const DataError& e) {
        throw StageError(stage, e.what(), C::Data);
    } catch (const CheckpointError& e) {
        throw StageError(stage, e.what(), C::Data);
    } catch (const std::exception& e) {
        throw StageError(stage, e.what(), C::Runtime);
    }
}

void write_attack_csv(std::ostream& out, std::span<const SampleOutcome> samples) {
    const auto old = out.precision(17);
    out << kAttackCsvHeader << '\n';
    for (const SampleOutcome& s : samples) {
        out << s.index << ',' << s.true_class << ',' << s.pre_class << ',' << s.post_class << ',' << s.l2 << ','
            << s.linf << ',' << (s.success ? 1 : 0) << ',' << s.iterations << '\n';
    }
    out.precision(old);
}

Run::Run(RunConfig cfg, std::ostream* log) : cfg_(std::move(cfg)), log_(log), seeds_(run_seeds(cfg_.seed)) {
    std::error_code ec;
    fs::create_directories(cfg_.out, ec);
    if (ec) throw DataError(DataError::Kind::Io, "cannot create output directory " + cfg_.out + ": " + ec.message());
}

fs::path Run::path(const std::string& name) {
    const fs::path p = fs::path(cfg_.out) / name;
    artifacts_.push_back(p);
    note("wrote " + p.string());
    return p;
}

void Run::note(const std::string& msg) {
    if (log_) *log_ << msg << std::endl;
}

void Run::write_json(const std::string& name, const nlohmann::json& j) {
    std::ofstream out(path(name));
    if (!out) throw DataError(DataError::Kind::Io, "cannot write " + name);
    out << j.dump(2) << '\n';
}

const Splits& Run::data() {
    if (!data_) data_ = load_data(cfg_.data, seeds_.data);
    return *data_;
}

const Network& Run::network() const {
    if (!net_) throw InvalidArgument("no network: train or load a checkpoint first");
    return *net_;
}

const Network& Run::train() {
    const Splits& d = data();
    const ModelSpec spec = build_model_spec(cfg_.model, d.train.sample_shape(), d.train.num_classes);
    TrainConfig tc = cfg_.train;
    tc.seed = seeds_.train;
    note("training " + std::to_string(tc.epochs) + " epochs on " + std::to_string(d.train.size()) + " samples");
    TrainResult r = madlab::train(init_parameters(spec, seeds_.init), d.train, tc,
                          {nullptr, [&](std::size_t e, const Network&) {
                               note("  epoch " + std::to_string(e + 1) + "/" + std::to_string(tc.epochs));
                           }});
    net_ = std::move(r.net);
    save_checkpoint(*net_, path("model.madn"));
    {
        std::ofstream out(path("train_log.csv"));
        write_train_log(out, r.log);
    }
    nlohmann::json j;
    j["schema_version"] = kReportSchemaVersion;
    j["report"] = "train";
    j["epochs"] = tc.epochs;
    j["batches"] = r.log.size();
    j["train_accuracy"] = accuracy(*net_, d.train);
    j["test_accuracy"] = accuracy(*net_, d.test);
    if (!r.log.empty()) {
        const LossBreakdown& l = r.log.back().loss;
        j["final_loss"] = {{"ce", l.ce}, {"siamese", l.siamese}, {"rvl", l.rvl}, {"jacobian", l.jacobian}, {"total", l.total}};
    }
    write_json("train.json", j);
    return *net_;
}

const Network& Run::load(const fs::path& checkpoint) {
    net_ = load_checkpoint(checkpoint);
    const Splits& d = data();
    if (net_->input_size() != d.test.sample_size() || net_->num_classes() != d.test.num_classes) {
        throw CheckpointError(CheckpointError::Kind::ShapeMismatch,
                              "checkpoint " + checkpoint.string() + " does not match the configured data");
    }
    note("loaded " + checkpoint.string());
    return *net_;
}

nlohmann::json Run::attack_summary(const AttackRun& run) const {
    const AttackEvaluation& ev = run.evaluation;
    std::size_t successes = 0;
    double l2 = 0.0, linf = 0.0;
    for (const SampleOutcome& s : ev.samples) {
        if (!s.success) continue;
        ++successes;
        l2 += s.l2;
        linf = std::max(linf, s.linf);
    }
    const AttackEntry* entry = nullptr;
    for (const AttackEntry& e : cfg_.attacks)
        if (e.label == run.label) entry = &e;
    nlohmann::json j;
    j["label"] = run.label;
    j["family"] = to_string(entry->attack.family);
    j["epsilon"] = entry->attack.epsilon;
    j["robust_accuracy"] = ev.robust_accuracy;
    j["evaluated"] = ev.evaluated;
    j["attacked"] = ev.attacked;
    j["successes"] = successes;
    j["mean_l2_successful"] = successes ? l2 / static_cast<double>(successes) : 0.0;
    j["max_linf"] = linf;
    return j;
}

const std::vector<AttackRun>& Run::attack(const std::vector<std::string>& labels, bool write_samples) {
    const Network& net = network();
    const Splits& d = data();
    for (const std::string& l : labels) {
        bool known = false;
        for (const AttackEntry& e : cfg_.attacks) known = known || e.label == l;
        if (!known) throw ConfigError("unknown attack label '" + l + "'");
    }
    attacks_.clear();
    nlohmann::json list = nlohmann::json::array();
    for (std::size_t k = 0; k < cfg_.attacks.size(); ++k) {
        const AttackEntry& e = cfg_.attacks[k];
        if (!labels.empty() && std::find(labels.begin(), labels.end(), e.label) == labels.end()) continue;
        AttackConfig ac = e.attack;
        ac.seed = seeds_.attack(k);
        note("attack " + e.label);
        AttackRun run{e.label, evaluate_attack(net, d.test, ac, e.max_samples, cfg_.workers)};
        if (write_samples) {
            std::ofstream out(path("attack_" + e.label + ".csv"));
            write_attack_csv(out, run.evaluation.samples);
        }
        list.push_back(attack_summary(run));
        attacks_.push_back(std::move(run));
    }
    if (write_samples && !attacks_.empty()) {
        nlohmann::json j;
        j["schema_version"] = kReportSchemaVersion;
        j["report"] = "attacks";
        j["attacks"] = list;
        write_json("attacks.json", j);
    }
    return attacks_;
}

void Run::evaluate() {
    const Network& net = network();
    const Splits& d = data();
    if (attacks_.empty() && !cfg_.attacks.empty()) attack({}, false);
    nlohmann::json j;
    j["schema_version"] = kReportSchemaVersion;
    j["report"] = "evaluate";
    j["clean_accuracy"] = accuracy(net, d.test);
    j["test_samples"] = d.test.size();
    nlohmann::json list = nlohmann::json::array();
    for (const AttackRun& r : attacks_) list.push_back(attack_summary(r));
    j["attacks"] = list;
    write_json("evaluate.json", j);
}

void Run::analyze() {
    const Network& net = network();
    const Splits& d = data();
    const std::size_t m = cfg_.analysis.margin_samples;
    const Dataset subset = m == 0 ? d.test : d.test.slice(0, m);
    const MarginReport margin = embedding_margin(net, subset, cfg_.workers);
    nlohmann::json mj = to_json(margin);
    const auto bound = mad_lower_bound(margin);
    nlohmann::json fractions = nlohmann::json::object();
    if (bound) {
        for (const AttackRun& r : attacks_) fractions[r.label] = fraction_below_bound(r.evaluation.samples, *bound);
    }
    mj["successful_attacks_below_bound"] = fractions;
    write_json("margin.json", mj);

    std::optional<Tensor> centroids;
    if (cfg_.analysis.separability) {
        const Tensor z = infer(net, d.test.inputs).embedding;
        const SeparabilityReport sep = separability(z, d.test.labels, d.test.num_classes);
        centroids = sep.centroid_distances;
        write_json("separability.json", to_json(sep));
    }
    for (const AttackRun& r : attacks_) {
        nlohmann::json cj = to_json(adversarial_confusion(r.evaluation.samples, d.test.num_classes, centroids));
        cj["attack"] = r.label;
        write_json("confusion_" + r.label + ".json", cj);
    }
}

void Run::distill() {
    const Network& net = network();
    const Splits& d = data();
    const AnalysisConfig& a = cfg_.analysis;
    QueryOracle oracle(net);
    ModelConfig proxy_model;
    proxy_model.hidden = a.proxy_hidden;
    proxy_model.slope = cfg_.model.slope;
    const ModelSpec spec = build_model_spec(proxy_model, d.train.sample_shape(), d.train.num_classes);
    TrainConfig tc = cfg_.train;
    tc.epochs = a.distill_epochs;
    tc.adversarial.reset();
    tc.seed = seeds_.proxy;
    const Dataset probes = a.distill_probes == 0 ? d.train : d.train.slice(0, a.distill_probes);
    note("distilling a proxy from " + std::to_string(probes.size()) + " probe queries");
    const DistillResult dr = distill_proxy(oracle, init_parameters(spec, seeds_.proxy), probes.inputs, tc, a.distill_targets);
    save_checkpoint(dr.proxy, path("proxy.madn"));
    const std::size_t before = oracle.queries();
    const double held_out = agreement(oracle, dr.proxy, d.test.inputs);
    nlohmann::json j;
    j["schema_version"] = kReportSchemaVersion;
    j["report"] = "distill";
    j["targets"] = a.distill_targets == DistillTargets::Soft ? "soft" : "hard";
    j["probes"] = probes.size();
    j["distill_queries"] = dr.queries;
    j["probe_agreement"] = dr.agreement;
    j["heldout_agreement"] = held_out;
    j["agreement_queries"] = oracle.queries() - before;
    j["gradient_queries"] = oracle.gradient_queries();
    write_json("distill.json", j);

    if (a.blackbox_attack.empty()) return;
    std::size_t k = 0;
    while (cfg_.attacks[k].label != a.blackbox_attack) ++k;
    const AttackEntry& e = cfg_.attacks[k];
    AttackConfig ac = e.attack;
    ac.seed = seeds_.attack(k);
    note("black-box attack " + e.label);
    const BlackBoxResult bb = blackbox_evaluate(oracle, dr.proxy, d.test, ac, e.max_samples, cfg_.workers);
    const AttackRun* white = nullptr;
    for (const AttackRun& r : attacks_)
        if (r.label == e.label) white = &r;
    AttackEvaluation wb = white ? white->evaluation : evaluate_attack(net, d.test, ac, e.max_samples, cfg_.workers);
    nlohmann::json bj;
    bj["schema_version"] = kReportSchemaVersion;
    bj["report"] = "blackbox";
    bj["attack"] = e.label;
    bj["blackbox_robust_accuracy"] = bb.robust_accuracy;
    bj["whitebox_robust_accuracy"] = wb.robust_accuracy;
    bj["attacked"] = bb.attacked;
    bj["evaluation_queries"] = bb.queries;
    bj["total_queries"] = oracle.queries();
    bj["gradient_queries"] = oracle.gradient_queries();
    write_json("blackbox.json", bj);
    std::ofstream out(path("blackbox_" + e.label + ".csv"));
    write_attack_csv(out, bb.samples);
}

void Run::finish() {
    nlohmann::json j;
    j["schema_version"] = kReportSchemaVersion;
    j["report"] = "manifest";
    j["seed"] = cfg_.seed;
    nlohmann::json files = nlohmann::json::array();
    for (const fs::path& p : artifacts_) files.push_back(p.filename().string());
    files.push_back("manifest.json");
    j["artifacts"] = files;
    write_json("manifest.json", j);
}

std::vector<fs::path> run_pipeline(const RunConfig& cfg, std::ostream* log) {
    std::optional<Run> run;
    run_stage("setup", [&] { run.emplace(cfg, log); });
    run_stage("data", [&] { run->data(); });
    run_stage("config", [&] {
        std::ofstream out(run->config().out + "/config.ini");
        out << serialize_config(cfg);
    });
    run_stage("train", [&] { run->train(); });
    if (!cfg.attacks.empty()) run_stage("attack", [&] { run->attack(); });
    run_stage("analyze", [&] { run->analyze(); });
    if (cfg.analysis.distill) run_stage("distill", [&] { run->distill(); });
    run_stage("report", [&] { run->finish(); });
    return run->artifacts();
}

}  // namespace madlab
