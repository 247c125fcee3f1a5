// mmoe: command-line front end for the dense-to-MoE upcycling pipeline.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "mmoe/atlas.hpp"
#include "mmoe/model.hpp"
#include "mmoe/train.hpp"
#include "mmoe/upcycle.hpp"

namespace {

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw mmoe::config_error("cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

mmoe::precision parse_precision(const std::string& s) {
    if (s == "f32") return mmoe::precision::f32;
    if (s == "f64") return mmoe::precision::f64;
    throw mmoe::config_error("precision must be f32 or f64");
}

// NAME=PATH pairs from repeated --data flags
std::map<std::string, mmoe::corpus> load_sources(const std::vector<std::string>& specs) {
    std::map<std::string, mmoe::corpus> out;
    for (const auto& spec : specs) {
        const size_t eq = spec.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
            throw mmoe::config_error("--data expects NAME=PATH, got '" + spec + "'");
        out.emplace(spec.substr(0, eq), mmoe::load_corpus_file(spec.substr(eq + 1)));
    }
    return out;
}

void apply_plan_overrides(mmoe::upcycle_plan& plan, const std::string& scale_mode_flag,
                          double drop_ratio_flag, bool has_drop, uint64_t seed_flag,
                          bool has_seed) {
    if (!scale_mode_flag.empty()) {
        if (scale_mode_flag == "multiplier")
            plan.mode = mmoe::scale_mode::forward_multiplier;
        else if (scale_mode_flag == "weight")
            plan.mode = mmoe::scale_mode::weight_scale;
        else
            throw mmoe::config_error("--scale-mode must be multiplier or weight");
    }
    if (has_drop) plan.drop_ratio = drop_ratio_flag;
    if (has_seed) plan.seed = seed_flag;
}

int run(int argc, char** argv) {
    CLI::App app{"dense-to-fine-grained-MoE upcycling toolkit"};
    app.require_subcommand(1);

    // init-dense
    auto* init = app.add_subcommand("init-dense", "create a fresh dense checkpoint");
    std::string init_config, init_out, init_prec = "f64";
    uint64_t init_seed = 0;
    init->add_option("--config", init_config, "model config JSON")->required();
    init->add_option("--out", init_out, "output checkpoint path")->required();
    init->add_option("--seed", init_seed, "init seed")->required();
    init->add_option("--precision", init_prec, "f32 | f64");

    // train
    auto* train = app.add_subcommand("train", "run the training loop");
    std::string train_in, train_out, train_schedule, train_mixture, train_metrics;
    std::vector<std::string> train_data;
    int64_t train_steps = 100, train_batch = 4, train_seq = 64;
    uint64_t train_seed = 0;
    train->add_option("--in", train_in, "input checkpoint")->required();
    train->add_option("--out", train_out, "output checkpoint")->required();
    train->add_option("--steps", train_steps, "optimizer steps");
    train->add_option("--seed", train_seed, "data-order seed")->required();
    train->add_option("--schedule", train_schedule, "LR schedule JSON")->required();
    train->add_option("--mixture", train_mixture, "mixture schedule JSON")->required();
    train->add_option("--data", train_data, "dataset source NAME=PATH")->required();
    train->add_option("--batch-size", train_batch, "sequences per step");
    train->add_option("--seq-len", train_seq, "tokens per sequence");
    train->add_option("--metrics", train_metrics, "per-step metrics CSV path");

    // upcycle (dense -> pseudo-MoE)
    auto* upcycle = app.add_subcommand("upcycle", "slice a dense FFN into a pseudo-MoE");
    std::string up_in, up_out, up_plan, up_scale;
    double up_drop = 0.0;
    uint64_t up_seed = 0;
    upcycle->add_option("--in", up_in, "dense checkpoint")->required();
    upcycle->add_option("--out", up_out, "pseudo-MoE checkpoint")->required();
    upcycle->add_option("--plan", up_plan, "upcycle plan JSON")->required();
    upcycle->add_option("--scale-mode", up_scale, "multiplier | weight");
    auto* up_drop_opt = upcycle->add_option("--drop-ratio", up_drop, "override plan drop_ratio");
    auto* up_seed_opt = upcycle->add_option("--seed", up_seed, "override plan seed");

    // expand (pseudo-MoE -> full MoE)
    auto* expand = app.add_subcommand("expand", "replicate experts into the full MoE");
    std::string ex_in, ex_out, ex_plan, ex_scale;
    double ex_drop = 0.0;
    uint64_t ex_seed = 0;
    expand->add_option("--in", ex_in, "pseudo-MoE checkpoint")->required();
    expand->add_option("--out", ex_out, "full MoE checkpoint")->required();
    expand->add_option("--plan", ex_plan, "upcycle plan JSON")->required();
    expand->add_option("--scale-mode", ex_scale, "multiplier | weight");
    auto* ex_drop_opt = expand->add_option("--drop-ratio", ex_drop, "override plan drop_ratio");
    auto* ex_seed_opt = expand->add_option("--seed", ex_seed, "override plan seed");

    // verify-equivalence
    auto* verify = app.add_subcommand("verify-equivalence",
                                      "compare dense and MoE forward passes on random probes");
    std::string v_dense, v_moe, v_out;
    int64_t v_probes = 8, v_len = 32;
    uint64_t v_seed = 0;
    verify->add_option("--dense", v_dense, "dense checkpoint")->required();
    verify->add_option("--moe", v_moe, "MoE checkpoint")->required();
    verify->add_option("--probes", v_probes, "number of random probes");
    verify->add_option("--seed", v_seed, "probe seed")->required();
    verify->add_option("--probe-length", v_len, "tokens per probe");
    verify->add_option("--out", v_out, "write the JSON report here too");

    // route-log
    auto* rlog = app.add_subcommand("route-log", "dump per-token routing records as JSONL");
    std::string rl_in, rl_data, rl_out;
    rlog->add_option("--in", rl_in, "MoE checkpoint")->required();
    rlog->add_option("--data", rl_data, "corpus file, one document per line")->required();
    rlog->add_option("--out", rl_out, "output JSONL path")->required();

    // atlas
    auto* atlas = app.add_subcommand("atlas",
                                     "per-language routing signatures, correlation, clustering");
    std::string at_in, at_dir;
    std::vector<std::string> at_data;
    atlas->add_option("--in", at_in, "MoE checkpoint")->required();
    atlas->add_option("--data", at_data, "language corpus LANG=PATH (repeat, >= 2)")->required();
    atlas->add_option("--out-dir", at_dir, "output directory")->required();

    // mixture-plan
    auto* mplan = app.add_subcommand("mixture-plan", "describe a staged data mixture");
    std::string mp_schedule;
    double mp_tokens = -1.0;
    mplan->add_option("--schedule", mp_schedule, "mixture schedule JSON")->required();
    mplan->add_option("--tokens", mp_tokens, "report the stage active at this token count");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);  // prints usage or help text
        return rc == 0 ? 0 : 1;
    }

    if (*init) {
        mmoe::model_config cfg = mmoe::config_from_json_text(read_text_file(init_config));
        mmoe::checkpoint ckpt = mmoe::init_dense(cfg, init_seed, parse_precision(init_prec));
        mmoe::save_checkpoint(ckpt, init_out);
        std::cout << "wrote " << init_out << "\n";
    } else if (*train) {
        mmoe::checkpoint ckpt = mmoe::load_checkpoint(train_in);
        mmoe::train_options opts;
        opts.steps = train_steps;
        opts.batch_size = train_batch;
        opts.seq_len = train_seq;
        opts.seed = train_seed;
        opts.schedule = mmoe::lr_schedule_from_json_text(read_text_file(train_schedule));
        opts.mixture = mmoe::mixture_from_json_text(read_text_file(train_mixture));
        auto sources = load_sources(train_data);
        mmoe::train_run_report rep = mmoe::train_run(ckpt, sources, opts);
        mmoe::save_checkpoint(ckpt, train_out);
        if (!train_metrics.empty()) mmoe::atomic_write_file(train_metrics, rep.to_csv());
        if (!rep.steps.empty()) {
            const auto& last = rep.steps.back();
            std::cout << "step " << last.step << " lm " << last.lm_loss << " total "
                      << last.total_loss << "\n";
        }
        std::cout << "wrote " << train_out << "\n";
    } else if (*upcycle) {
        mmoe::upcycle_plan plan = mmoe::plan_from_json_text(read_text_file(up_plan));
        apply_plan_overrides(plan, up_scale, up_drop, up_drop_opt->count() > 0, up_seed,
                             up_seed_opt->count() > 0);
        mmoe::checkpoint dense = mmoe::load_checkpoint(up_in);
        mmoe::checkpoint pseudo = mmoe::build_pseudo_moe(dense, plan);
        mmoe::save_checkpoint(pseudo, up_out);
        std::cout << "wrote " << up_out << "\n";
    } else if (*expand) {
        mmoe::upcycle_plan plan = mmoe::plan_from_json_text(read_text_file(ex_plan));
        apply_plan_overrides(plan, ex_scale, ex_drop, ex_drop_opt->count() > 0, ex_seed,
                             ex_seed_opt->count() > 0);
        mmoe::checkpoint pseudo = mmoe::load_checkpoint(ex_in);
        mmoe::checkpoint full = mmoe::expand_to_full_moe(pseudo, plan);
        mmoe::save_checkpoint(full, ex_out);
        std::cout << "wrote " << ex_out << "\n";
    } else if (*verify) {
        mmoe::checkpoint dense = mmoe::load_checkpoint(v_dense);
        mmoe::checkpoint moe = mmoe::load_checkpoint(v_moe);
        mmoe::equivalence_report rep =
            mmoe::verify_equivalence(dense, moe, v_probes, v_seed, v_len);
        const std::string text = rep.to_json_text();
        std::cout << text;
        if (!v_out.empty()) mmoe::atomic_write_file(v_out, text);
        return rep.pass ? 0 : 1;
    } else if (*rlog) {
        mmoe::checkpoint ckpt = mmoe::load_checkpoint(rl_in);
        if (!ckpt.config.is_moe()) throw mmoe::config_error("route-log needs an MoE checkpoint");
        mmoe::corpus c = mmoe::load_corpus_file(rl_data);
        mmoe::routing_log agg;
        agg.init(ckpt.config.n_layers, ckpt.config.moe->n_experts, ckpt.config.moe->top_k);
        for (const auto& doc : c.docs) agg.merge(mmoe::forward_logits(doc, ckpt).log);
        mmoe::atomic_write_file(rl_out, agg.to_jsonl());
        std::cout << "wrote " << rl_out << " (" << agg.records.size() << " records)\n";
    } else if (*atlas) {
        mmoe::checkpoint ckpt = mmoe::load_checkpoint(at_in);
        std::vector<mmoe::specialization_matrix> sigs;
        for (const auto& spec : at_data) {
            const size_t eq = spec.find('=');
            if (eq == std::string::npos)
                throw mmoe::config_error("--data expects LANG=PATH, got '" + spec + "'");
            const std::string lang = spec.substr(0, eq);
            mmoe::corpus c = mmoe::load_corpus_file(spec.substr(eq + 1));
            sigs.push_back(mmoe::collect_signature(ckpt, c.docs, lang));
        }
        std::filesystem::create_directories(at_dir);
        for (const auto& s : sigs)
            mmoe::atomic_write_file(at_dir + "/signature." + s.language + ".json",
                                    s.to_json_text());
        mmoe::correlation_matrix corr = mmoe::make_correlation_matrix(sigs);
        mmoe::atomic_write_file(at_dir + "/correlation.csv", corr.to_csv());
        mmoe::dendrogram tree = mmoe::cluster(corr);
        mmoe::atomic_write_file(at_dir + "/dendrogram.nwk", mmoe::export_dendrogram(tree));
        std::cout << "wrote " << sigs.size() << " signatures, correlation.csv, dendrogram.nwk"
                  << " under " << at_dir << "\n";
    } else if (*mplan) {
        mmoe::mixture_schedule m = mmoe::mixture_from_json_text(read_text_file(mp_schedule));
        double start = 0.0;
        std::cout << m.stages.size() << " stages\n";
        for (size_t i = 0; i < m.stages.size(); ++i) {
            const auto& s = m.stages[i];
            std::cout << "stage " << (i + 1) << ": tokens [" << start << ", "
                      << (start + s.token_budget) << "), budget " << s.token_budget << ", "
                      << s.weights.size() << " datasets\n";
            for (const auto& [name, w] : s.weights)
                std::cout << "  " << name << " " << w << "\n";
            start += s.token_budget;
        }
        if (mp_tokens >= 0) {
            const size_t active = m.stage_at(mp_tokens);
            std::cout << "tokens " << mp_tokens << " -> stage " << (active + 1) << "\n";
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const mmoe::config_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const mmoe::plan_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const mmoe::dim_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
