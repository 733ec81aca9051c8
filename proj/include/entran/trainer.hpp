#pragma once

#include <filesystem>

#include "checkpoint.hpp"
#include "config.hpp"
#include "dataset.hpp"
#include "genotype.hpp"
#include "optim.hpp"
#include "supernet.hpp"

namespace entran {

struct EpochMetrics {
    int epoch = 0;
    double train_loss = 0, val_loss = 0, val_acc = 0, tau = 0, mean_t = 0;
    int active_edges_normal = 0, active_edges_reduction = 0;
};

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string metrics_csv(const std::vector<EpochMetrics>& rows) {
    std::string out = "epoch,train_loss,val_loss,val_acc,tau,mean_t,active_edges_normal,active_edges_reduction\n";
    for (const auto& r : rows) {
        out += std::to_string(r.epoch) + "," + format_double(r.train_loss) + "," + format_double(r.val_loss) + "," +
               format_double(r.val_acc) + "," + format_double(r.tau) + "," + format_double(r.mean_t) + "," +
               std::to_string(r.active_edges_normal) + "," + std::to_string(r.active_edges_reduction) + "\n";
    }
    return out;
}

inline nlohmann::json metrics_to_json(const std::vector<EpochMetrics>& rows) {
    auto arr = nlohmann::json::array();
    for (const auto& r : rows)
        arr.push_back({{"epoch", r.epoch},
                       {"train_loss", r.train_loss},
                       {"val_loss", r.val_loss},
                       {"val_acc", r.val_acc},
                       {"tau", r.tau},
                       {"mean_t", r.mean_t},
                       {"active_edges_normal", r.active_edges_normal},
                       {"active_edges_reduction", r.active_edges_reduction}});
    return arr;
}

inline std::vector<EpochMetrics> metrics_from_json(const nlohmann::json& j) {
    std::vector<EpochMetrics> rows;
    for (const auto& e : j) {
        EpochMetrics r;
        r.epoch = e.at("epoch").get<int>();
        r.train_loss = e.at("train_loss").get<double>();
        r.val_loss = e.at("val_loss").get<double>();
        r.val_acc = e.at("val_acc").get<double>();
        r.tau = e.at("tau").get<double>();
        r.mean_t = e.at("mean_t").get<double>();
        r.active_edges_normal = e.at("active_edges_normal").get<int>();
        r.active_edges_reduction = e.at("active_edges_reduction").get<int>();
        rows.push_back(r);
    }
    return rows;
}

struct SearchResult {
    Genotype genotype;
    DerivationHistory history;
    std::vector<EpochMetrics> metrics;
};

// Batched no-tape inference accuracy.
inline double evaluate_accuracy(Supernet& net, const Dataset& data, Supernet::ForwardOptions opts = Supernet::ForwardOptions(),
                                int batch_size = 64) {
    if (data.size() == 0) throw std::invalid_argument("evaluate_accuracy: empty dataset");
    long correct = 0;
    for (std::size_t start = 0; start < data.size(); start += std::size_t(batch_size)) {
        std::vector<int> idx;
        for (std::size_t i = start; i < std::min(data.size(), start + std::size_t(batch_size)); ++i)
            idx.push_back(int(i));
        Batch b = make_batch(data, idx);
        ad::Tape tape(false);
        auto logits = net.forward(tape, b.images, opts);
        int m = logits->shape[1];
        for (std::size_t r = 0; r < idx.size(); ++r) {
            int arg = 0;
            for (int c = 1; c < m; ++c)
                if (logits->data[r * std::size_t(m) + std::size_t(c)] > logits->data[r * std::size_t(m) + std::size_t(arg)])
                    arg = c;
            if (arg == b.labels[r]) ++correct;
        }
    }
    return double(correct) / double(data.size());
}

// Alternating first-order bi-level search: SGD-with-momentum on cell weights
// over the train half, Adam on architecture parameters over the val half.
class Searcher {
public:
    Searcher(const RunConfig& cfg, const Dataset& data)
        : cfg_(cfg),
          space_(SearchSpace::build(cfg.space)),
          dims_{data.channels, data.height, data.width, data.classes} {
        cfg_.trainer.validate();
        Rng init_rng = Rng::from(cfg_.trainer.seed, 1);
        net_ = std::make_unique<Supernet>(space_, cfg_.supernet, dims_, init_rng, cfg_.trainer.temperature.initial);
        auto halves = split_dataset(data, cfg_.trainer.seed);
        train_ = std::move(halves.first);
        val_ = std::move(halves.second);
        w_opt_ = std::make_unique<SgdMomentum>(net_->weight_tensors(), cfg_.trainer.w_momentum,
                                               cfg_.trainer.w_weight_decay);
        arch_opt_ = std::make_unique<Adam>(net_->arch_tensors(cfg_.supernet.mode == Mode::dst), cfg_.trainer.arch_lr,
                                           cfg_.trainer.arch_beta1, cfg_.trainer.arch_beta2,
                                           cfg_.trainer.arch_weight_decay);
        rng_train_ = Rng::from(cfg_.trainer.seed, 2);
        rng_val_ = Rng::from(cfg_.trainer.seed, 3);
    }

    Supernet& net() { return *net_; }
    const RunConfig& config() const { return cfg_; }
    const Dataset& train_half() const { return train_; }
    const Dataset& val_half() const { return val_; }
    const std::vector<EpochMetrics>& metrics() const { return metrics_; }
    const DerivationHistory& history() const { return history_; }
    int epochs_done() const { return epoch_done_; }

    // One paired update: (a) weight step on the train batch at frozen
    // architecture parameters, (b) architecture step on the val batch at
    // frozen weights (first-order: w* is the current weights).
    void search_step(const Batch& train_batch, const Batch& val_batch, double lr) {
        auto weights = w_opt_->params();
        zero_grads(weights);
        {
            ad::Tape tape;
            auto logits = net_->forward(tape, train_batch.images);
            auto loss = ad::cross_entropy(tape, logits, train_batch.labels);
            if (!std::isfinite(loss->item()))
                throw std::runtime_error("non-finite train loss at epoch " + std::to_string(epoch_done_ + 1));
            last_train_loss_ = loss->item();
            tape.backward(loss);
            clip_grad_norm(weights, cfg_.trainer.grad_clip);
            w_opt_->step(lr);
        }
        zero_grads(arch_opt_->params());
        {
            ad::Tape tape;
            Supernet::ForwardOptions opts;
            ConnectionActivations acts_n, acts_r;
            opts.acts_normal_out = &acts_n;
            opts.acts_reduction_out = &acts_r;
            auto logits = net_->forward(tape, val_batch.images, opts);
            auto loss = ad::cross_entropy(tape, logits, val_batch.labels);
            if (cfg_.supernet.mode == Mode::dst && cfg_.trainer.lambda > 0.0) {
                std::vector<ad::TensorPtr> thresholds = acts_n.t;
                thresholds.insert(thresholds.end(), acts_r.t.begin(), acts_r.t.end());
                loss = ad::add(tape, loss, sparsity_penalty(tape, thresholds, cfg_.trainer.lambda));
            }
            if (!std::isfinite(loss->item()))
                throw std::runtime_error("non-finite val loss at epoch " + std::to_string(epoch_done_ + 1));
            last_val_loss_ = loss->item();
            tape.backward(loss);
            arch_opt_->step();
        }
    }

    EpochMetrics run_epoch() {
        if (epoch_done_ >= cfg_.trainer.epochs) throw std::logic_error("run_epoch: all epochs already done");
        double lr = cosine_lr(cfg_.trainer.w_lr, epoch_done_, cfg_.trainer.epochs);

        std::vector<int> train_idx(train_.size()), val_idx(val_.size());
        for (std::size_t i = 0; i < train_idx.size(); ++i) train_idx[i] = int(i);
        for (std::size_t i = 0; i < val_idx.size(); ++i) val_idx[i] = int(i);
        deterministic_shuffle(train_idx, rng_train_);
        deterministic_shuffle(val_idx, rng_val_);

        int bs_t = std::min<int>(cfg_.trainer.batch_size, int(train_.size()));
        int bs_v = std::min<int>(cfg_.trainer.batch_size, int(val_.size()));
        int steps = std::max(1, std::min(int(train_.size()) / bs_t, int(val_.size()) / bs_v));

        double train_sum = 0, val_sum = 0;
        for (int s = 0; s < steps; ++s) {
            std::vector<int> tb(train_idx.begin() + std::ptrdiff_t(s * bs_t),
                                train_idx.begin() + std::ptrdiff_t((s + 1) * bs_t));
            std::vector<int> vb(val_idx.begin() + std::ptrdiff_t(s * bs_v),
                                val_idx.begin() + std::ptrdiff_t((s + 1) * bs_v));
            search_step(make_batch(train_, tb), make_batch(val_, vb), lr);
            train_sum += last_train_loss_;
            val_sum += last_val_loss_;
        }
        ++epoch_done_;
        if (cfg_.supernet.mode != Mode::darts_baseline) {
            net_->arch_normal.tau = anneal(net_->arch_normal.tau, cfg_.trainer.temperature);
            net_->arch_reduction.tau = anneal(net_->arch_reduction.tau, cfg_.trainer.temperature);
        }

        Genotype geno = net_->derive();
        history_.record(epoch_done_, geno);

        EpochMetrics m;
        m.epoch = epoch_done_;
        m.train_loss = train_sum / steps;
        m.val_loss = val_sum / steps;
        m.val_acc = evaluate_accuracy(*net_, val_);
        m.tau = net_->arch_normal.tau;
        m.mean_t = mean_threshold();
        m.active_edges_normal = geno.normal.connection_count();
        m.active_edges_reduction = geno.reduction.connection_count();
        metrics_.push_back(m);
        return m;
    }

    double mean_threshold() const {
        if (cfg_.supernet.mode != Mode::dst) return 0.0;
        double acc = 0;
        long n = 0;
        for (const ArchParams* arch : {&net_->arch_normal, &net_->arch_reduction})
            for (double b : arch->beta->data) {
                acc += 1.0 / (1.0 + std::exp(-b));
                ++n;
            }
        return acc / double(n);
    }

    SearchResult run(const std::string& out_dir = "") {
        if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
        try {
            while (epoch_done_ < cfg_.trainer.epochs) {
                run_epoch();
                if (!out_dir.empty()) {
                    save(out_dir + "/checkpoint.bin");
                    write_file_atomic(out_dir + "/metrics.csv", metrics_csv(metrics_));
                }
            }
        } catch (...) {
            if (!out_dir.empty()) save(out_dir + "/checkpoint.bin");
            throw;
        }
        SearchResult result{net_->derive(), history_, metrics_};
        if (!out_dir.empty()) write_artifacts(out_dir, result);
        return result;
    }

    void write_artifacts(const std::string& out_dir, const SearchResult& result) const {
        std::filesystem::create_directories(out_dir);
        nlohmann::json res;
        res["config"] = config_to_json(cfg_);
        res["genotype"] = genotype_to_json(result.genotype);
        res["metrics"] = metrics_to_json(result.metrics);
        if (!result.metrics.empty()) {
            res["final_val_acc"] = result.metrics.back().val_acc;
            res["final_val_loss"] = result.metrics.back().val_loss;
        }
        write_file_atomic(out_dir + "/result.json", res.dump(2) + "\n");
        write_file_atomic(out_dir + "/history.json", result.history.to_json().dump(2) + "\n");
        write_file_atomic(out_dir + "/metrics.csv", metrics_csv(result.metrics));
        write_file_atomic(out_dir + "/normal.dot", export_dot(result.genotype.normal, "normal"));
        write_file_atomic(out_dir + "/reduction.dot", export_dot(result.genotype.reduction, "reduction"));
    }

    // ---- checkpointing ------------------------------------------------------

    void save(const std::string& path) const {
        Checkpoint ckpt;
        ckpt.config_json = config_to_json(cfg_).dump();
        nlohmann::json extra;
        extra["history"] = history_.to_json();
        extra["metrics"] = metrics_to_json(metrics_);
        ckpt.history_json = extra.dump();
        auto put = [&](const std::string& name, std::vector<double> data) {
            ckpt.arrays.emplace_back(name, std::move(data));
        };
        put("meta/epoch", {double(epoch_done_)});
        put("meta/tau", {net_->arch_normal.tau});
        put("rng/train", {double(rng_train_.state & 0xffffffffULL), double(rng_train_.state >> 32)});
        put("rng/val", {double(rng_val_.state & 0xffffffffULL), double(rng_val_.state >> 32)});
        for (auto& [name, t] : net_->named_weights()) put("w/" + name, t->data);
        for (auto& [name, t] : net_->named_arch_params()) put("arch/" + name, t->data);
        {
            auto names = net_->named_weights();
            auto& vel = w_opt_->state();
            for (std::size_t i = 0; i < names.size(); ++i) put("opt/w/v/" + names[i].first, vel[i]);
        }
        {
            const auto& params = arch_opt_->params();
            auto arch_names = net_->named_arch_params();
            for (std::size_t i = 0; i < params.size(); ++i) {
                std::string name;
                for (auto& [n, t] : arch_names)
                    if (t == params[i]) name = n;
                put("opt/arch/m/" + name, arch_opt_->first_moments()[i]);
                put("opt/arch/v/" + name, arch_opt_->second_moments()[i]);
            }
            put("opt/arch/t", {double(arch_opt_->step_count())});
        }
        save_checkpoint(path, ckpt);
    }

    void restore(const std::string& path) {
        Checkpoint ckpt = load_checkpoint(path);
        RunConfig saved = parse_config(nlohmann::json::parse(ckpt.config_json));
        if (config_to_json(saved) != config_to_json(cfg_))
            throw std::runtime_error("checkpoint config does not match this run's config");
        auto extra = nlohmann::json::parse(ckpt.history_json);
        history_ = DerivationHistory::from_json(extra.at("history"));
        metrics_ = metrics_from_json(extra.at("metrics"));
        epoch_done_ = int(ckpt.get("meta/epoch")[0]);
        net_->arch_normal.tau = ckpt.get("meta/tau")[0];
        net_->arch_reduction.tau = ckpt.get("meta/tau")[0];
        auto restore_rng = [&](const char* name, Rng& rng) {
            const auto& a = ckpt.get(name);
            rng.state = std::uint64_t(a[0]) | (std::uint64_t(a[1]) << 32);
        };
        restore_rng("rng/train", rng_train_);
        restore_rng("rng/val", rng_val_);
        auto load_into = [&](const std::string& name, ad::TensorPtr t) {
            const auto& a = ckpt.get(name);
            if (a.size() != t->data.size())
                throw std::runtime_error("checkpoint array " + name + " has length " + std::to_string(a.size()) +
                                         ", expected " + std::to_string(t->data.size()));
            t->data = a;
        };
        for (auto& [name, t] : net_->named_weights()) load_into("w/" + name, t);
        for (auto& [name, t] : net_->named_arch_params()) load_into("arch/" + name, t);
        {
            auto names = net_->named_weights();
            auto& vel = w_opt_->state();
            for (std::size_t i = 0; i < names.size(); ++i) vel[i] = ckpt.get("opt/w/v/" + names[i].first);
        }
        {
            const auto& params = arch_opt_->params();
            auto arch_names = net_->named_arch_params();
            for (std::size_t i = 0; i < params.size(); ++i) {
                std::string name;
                for (auto& [n, t] : arch_names)
                    if (t == params[i]) name = n;
                arch_opt_->first_moments()[i] = ckpt.get("opt/arch/m/" + name);
                arch_opt_->second_moments()[i] = ckpt.get("opt/arch/v/" + name);
            }
            arch_opt_->step_count() = long(ckpt.get("opt/arch/t")[0]);
        }
    }

private:
    RunConfig cfg_;
    SearchSpace space_;
    DataDims dims_;
    std::unique_ptr<Supernet> net_;
    Dataset train_, val_;
    std::unique_ptr<SgdMomentum> w_opt_;
    std::unique_ptr<Adam> arch_opt_;
    Rng rng_train_, rng_val_;
    int epoch_done_ = 0;
    double last_train_loss_ = 0, last_val_loss_ = 0;
    DerivationHistory history_;
    std::vector<EpochMetrics> metrics_;
};

inline SearchResult run_search(const RunConfig& cfg, const Dataset& data, const std::string& out_dir = "",
                               const std::string& resume_from = "") {
    Searcher searcher(cfg, data);
    if (!resume_from.empty()) searcher.restore(resume_from);
    return searcher.run(out_dir);
}

}  // namespace entran
