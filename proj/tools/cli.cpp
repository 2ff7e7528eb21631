#include "cli.hpp"

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <thread>

#include "vxda/losses.hpp"
#include "vxda/model.hpp"

namespace vxda::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void require_object(const json& j, const std::string& what) {
    if (!j.is_object()) throw UsageError(what + " must be a JSON object");
}

fs::path resolve(const fs::path& base, const json& value) {
    fs::path p(value.get<std::string>());
    return p.is_absolute() ? p : base / p;
}

data::DomainProfile profile_from(const json& j) {
    return j.is_string() ? data::DomainProfile::by_name(j.get<std::string>()) : data::DomainProfile::from_json(j);
}

void apply_gen(data::GenConfig& g, const json& j) {
    require_object(j, "\"gen\"");
    for (const auto& [key, value] : j.items()) {
        if (key == "classes") g.classes = value.get<int>();
        else if (key == "instances") g.instances = value.get<int>();
        else if (key == "views") g.views = value.get<int>();
        else if (key == "voxel_size") g.voxel_size = value.get<int>();
        else if (key == "image_size") g.image_size = value.get<int>();
        else if (key == "seed") g.seed = value.get<std::uint64_t>();
        else if (key == "train_fraction") g.train_fraction = value.get<double>();
        else if (key == "target_profile") g.target = profile_from(value);
        else throw UsageError("unknown gen config key '" + key + "'");
    }
}

void apply_eval(metrics::EvalConfig& e, const json& j) {
    require_object(j, "\"eval\"");
    for (const auto& [key, value] : j.items()) {
        if (key == "threshold") e.threshold = value.get<double>();
        else if (key == "split") e.split = data::split_from_string(value.get<std::string>());
        else if (key == "domain") e.domain = metrics::domain_selector_from_string(value.get<std::string>());
        else throw UsageError("unknown eval config key '" + key + "'");
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
    f.flush();
    if (!f) throw std::runtime_error("write failed for " + path.string());
}

data::Dataset open_dataset(const fs::path& dir) {
    if (dir.empty()) throw UsageError("--data is required");
    if (!fs::is_directory(dir)) throw UsageError("data directory '" + dir.string() + "' does not exist");
    return data::Dataset::open(dir);
}

nn::Checkpoint open_checkpoint(const fs::path& file) {
    if (file.empty()) throw UsageError("--checkpoint is required");
    if (!fs::is_regular_file(file)) throw UsageError("checkpoint '" + file.string() + "' does not exist");
    return nn::load_checkpoint(file);
}

std::string overall_row(const metrics::IoUReport& r) {
    const auto csv = metrics::iou_csv(r);
    const auto start = csv.rfind("overall,");
    return csv.substr(start, csv.size() - start - 1);
}

}  // namespace

CliConfig CliConfig::from_file(const fs::path& file) {
    std::ifstream f(file);
    if (!f) throw UsageError("cannot read config file '" + file.string() + "'");
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw UsageError("config file '" + file.string() + "' is not valid JSON: " + e.what());
    }
    require_object(j, "config file");
    const auto base = fs::absolute(file).parent_path();
    CliConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "command") c.command = value.get<std::string>();
        else if (key == "data") c.data = resolve(base, value);
        else if (key == "out") c.out = resolve(base, value);
        else if (key == "checkpoint") c.checkpoint = resolve(base, value);
        else if (key == "threads") c.threads = value.get<int>();
        else if (key == "force") c.force = value.get<bool>();
        else if (key == "gen") apply_gen(c.gen, value);
        else if (key == "train") {
            try {
                c.train = train::TrainConfig::from_json(value);
            } catch (const std::invalid_argument& e) {
                throw UsageError(e.what());
            }
        } else if (key == "eval") apply_eval(c.eval, value);
        else if (key == "embed") {
            require_object(value, "\"embed\"");
            for (const auto& [ek, ev] : value.items()) {
                if (ek == "count") c.embed_count = ev.get<int>();
                else if (ek == "split") c.eval.split = data::split_from_string(ev.get<std::string>());
                else if (ek == "svg") c.embed_svg = ev.get<bool>();
                else throw UsageError("unknown embed config key '" + ek + "'");
            }
        } else throw UsageError("unknown config key '" + key + "'");
    }
    return c;
}

int generation_threads(int requested) {
    int n = requested > 0 ? requested : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    if (const char* env = std::getenv("VXDA_THREADS"); env && *env) {
        char* end = nullptr;
        const long cap = std::strtol(env, &end, 10);
        if (*end != '\0' || cap < 1) throw UsageError("VXDA_THREADS must be a positive integer");
        n = std::min<long>(n, cap);
    }
    return n;
}

int cmd_gen_data(const CliConfig& c, std::ostream& out) {
    if (c.out.empty()) throw UsageError("--out is required");
    c.gen.validate();
    if (fs::exists(c.out) && !fs::is_empty(c.out)) {
        if (!c.force) throw UsageError("output directory '" + c.out.string() + "' is not empty (use --force)");
        fs::remove(c.out / "manifest.json");
        fs::remove_all(c.out / "blobs");
    }
    const auto manifest = data::build_dataset(c.gen, c.out, generation_threads(c.threads));
    out << "wrote " << manifest.records.size() << " records to " << c.out.string() << "\n";
    return kOk;
}

int cmd_train(const CliConfig& c, std::ostream& out) {
    if (c.out.empty()) throw UsageError("--out is required");
    c.train.validate();
    const auto ds = open_dataset(c.data);
    const auto samples = ds.load_all();
    fs::create_directories(c.out);
    write_text(c.out / "train_config.json", c.train.to_json().dump(2) + "\n");
    out << "training " << c.train.method << " for " << c.train.epochs << " epochs on " << samples.size() << " samples\n";
    out << train::TrainLog::csv_header();
    const auto result = train::train(c.train, samples, ds.manifest(), c.out,
                                     [&out](const train::EpochRecord& r) { out << train::TrainLog::csv_row(r) << std::flush; });
    out << "checkpoint: " << (c.out / "checkpoint.bin").string() << "\n";
    return kOk;
}

int cmd_eval(const CliConfig& c, std::ostream& out) {
    const auto ds = open_dataset(c.data);
    const auto ck = open_checkpoint(c.checkpoint);
    train::check_compatible(ck.config, ds.manifest());
    const auto result = train::evaluate(ck, ds.load_all(), ds.manifest(), c.eval);
    const auto text = c.eval.domain == metrics::DomainSelector::both ? metrics::iou_csv(result.reports)
                                                                      : metrics::iou_csv(result.reports.front().second);
    const auto path = (c.out.empty() ? fs::path(".") : c.out) / "iou_report.csv";
    write_text(path, text);
    for (const auto& [domain, report] : result.reports) out << domain << ": " << overall_row(report) << "\n";
    if (result.domain_acc) out << "domain_acc: " << *result.domain_acc << "\n";
    out << "report: " << path.string() << "\n";
    return kOk;
}

int cmd_embed(const CliConfig& c, std::ostream& out) {
    if (c.out.empty()) throw UsageError("--out is required");
    if (c.embed_count < 1) throw UsageError("--count must be positive");
    const auto ds = open_dataset(c.data);
    const auto ck = open_checkpoint(c.checkpoint);
    train::check_compatible(ck.config, ds.manifest());
    const auto samples = ds.load_all();

    // Evenly spaced picks from each domain of the split.
    std::vector<std::size_t> picked;
    for (auto d : {data::Domain::source, data::Domain::target}) {
        const auto idx = data::select(samples, ds.manifest(), c.eval.split, d);
        const auto n = std::min(idx.size(), static_cast<std::size_t>(c.embed_count));
        for (std::size_t i = 0; i < n; ++i) picked.push_back(idx[i * idx.size() / n]);
    }
    if (picked.size() < 3) throw UsageError("embedding needs at least 3 samples, got " + std::to_string(picked.size()));

    auto params = ck.params.clone();
    const auto pred = metrics::predict(ck.config, params, samples, picked);
    std::vector<double> features(pred.latent.begin(), pred.latent.end());
    const auto emb = metrics::pca_embed(features, pred.count, pred.latent_dim, 2);
    std::vector<int> tags;
    std::vector<std::string> classes;
    for (auto i : picked) {
        tags.push_back(static_cast<int>(samples[i].domain));
        classes.push_back(ds.manifest().class_names.at(static_cast<std::size_t>(samples[i].class_label)));
    }
    write_text(c.out, metrics::embedding_csv(emb, tags, classes));
    out << "wrote " << picked.size() << " rows to " << c.out.string() << "\n";
    out << "explained variance: " << emb.explained[0] << ", " << emb.explained[1] << " of " << emb.total_variance << "\n";
    if (c.embed_svg) {
        auto svg = c.out;
        svg.replace_extension(".svg");
        write_text(svg, metrics::embedding_svg(emb, tags));
        out << "svg: " << svg.string() << "\n";
    }
    return kOk;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Single-view voxel reconstruction with unsupervised domain adaptation", "vxda"};
    app.require_subcommand(1);

    std::string config_file;
    auto add_config = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_file, "JSON config file; flags override its values")->check(CLI::ExistingFile);
    };

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic source/target dataset");
    add_config(gen);
    std::string gen_out, gen_profile;
    std::uint64_t gen_seed = 0;
    int classes = 0, instances = 0, views = 0, voxel = 0, image = 0, threads = 0;
    double train_fraction = 0;
    bool force = false;
    auto* o_gen_out = gen->add_option("--out", gen_out, "Output directory");
    auto* o_gen_seed = gen->add_option("--seed", gen_seed, "Generation seed (default 0)");
    auto* o_classes = gen->add_option("--classes", classes, "Number of shape classes, 1-6 (default 6)");
    auto* o_instances = gen->add_option("--instances", instances, "Instances per class (default 10)");
    auto* o_views = gen->add_option("--views", views, "Views per instance on a 360/views azimuth grid (default 8)");
    auto* o_profile = gen->add_option("--target-profile", gen_profile, "Target domain: lab, wild or segmented (default wild)")
                          ->check(CLI::IsMember({"lab", "wild", "segmented"}));
    auto* o_voxel = gen->add_option("--voxel-size", voxel, "Voxel grid edge, 16 or 32 (default 16)");
    auto* o_image = gen->add_option("--image-size", image, "Image edge in pixels (default 32)");
    auto* o_fraction = gen->add_option("--train-fraction", train_fraction, "Share of instances in the train split (default 0.8)");
    auto* o_threads = gen->add_option("--threads", threads, "Worker threads, 0 = all cores (capped by VXDA_THREADS)");
    auto* o_force = gen->add_flag("--force", force, "Replace an existing dataset in --out");

    // train
    auto* tr = app.add_subcommand("train", "Train a network on a dataset");
    add_config(tr);
    std::string tr_data, tr_out, method, grl_mode;
    std::uint64_t tr_seed = 0;
    int epochs = 0, batch = 0, eval_every = 0, ckpt_every = 0;
    double lr = 0, grl_lambda = 0;
    auto* o_tr_data = tr->add_option("--data", tr_data, "Dataset directory");
    auto* o_method = tr->add_option("--method", method, "none, dann, dann+class, coral or mmd (default dann+class)");
    auto* o_epochs = tr->add_option("--epochs", epochs, "Training epochs (default 30)");
    auto* o_tr_seed = tr->add_option("--seed", tr_seed, "Training seed (default 0)");
    auto* o_tr_out = tr->add_option("--out", tr_out, "Run directory for checkpoints and train_log.csv");
    auto* o_batch = tr->add_option("--batch-size", batch, "Source + target batch size, even and >= 4 (default 32)");
    auto* o_lr = tr->add_option("--lr", lr, "Adam learning rate (default 1e-3)");
    auto* o_grl = tr->add_option("--grl-schedule", grl_mode, "constant or ramp (default ramp)");
    auto* o_lambda = tr->add_option("--grl-lambda", grl_lambda, "Maximum gradient-reversal strength");
    auto* o_eval_every = tr->add_option("--eval-every", eval_every, "Evaluate every N epochs (default 1)");
    auto* o_ckpt_every = tr->add_option("--checkpoint-every", ckpt_every, "Extra checkpoint every N epochs (default 0 = final only)");

    // eval
    auto* ev = app.add_subcommand("eval", "Write per-class IoU reports for a checkpoint");
    add_config(ev);
    std::string ev_ckpt, ev_data, ev_out, split, domain;
    double threshold = 0;
    auto* o_ev_ckpt = ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file");
    auto* o_ev_data = ev->add_option("--data", ev_data, "Dataset directory");
    auto* o_threshold = ev->add_option("--threshold", threshold, "Occupancy threshold t, p > t counts (default 0.4)");
    auto* o_split = ev->add_option("--split", split, "train, test or all (default test)");
    auto* o_domain = ev->add_option("--domain", domain, "source, target or both (default both)");
    auto* o_ev_out = ev->add_option("--out", ev_out, "Directory for iou_report.csv (default .)");

    // embed
    auto* em = app.add_subcommand("embed", "Export a 2-D PCA embedding of latent features");
    add_config(em);
    std::string em_ckpt, em_data, em_out, em_split;
    int count = 0;
    bool svg = false;
    auto* o_em_ckpt = em->add_option("--checkpoint", em_ckpt, "Checkpoint file");
    auto* o_em_data = em->add_option("--data", em_data, "Dataset directory");
    auto* o_em_out = em->add_option("--out", em_out, "Embedding CSV (x,y,domain,class)");
    auto* o_count = em->add_option("--count", count, "Samples per domain (default 48)");
    auto* o_em_split = em->add_option("--split", em_split, "train, test or all (default test)");
    auto* o_svg = em->add_flag("--svg", svg, "Also write a scatter plot next to --out");

    std::vector<const char*> argv{"vxda"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help("", CLI::AppFormatMode::Normal);
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        // --help on a subcommand is raised against the subcommand's app
        if (e.get_exit_code() == 0) {
            for (auto* sub : app.get_subcommands()) out << sub->help();
            if (app.get_subcommands().empty()) out << app.help();
            return kOk;
        }
        err << "error: " << e.what() << "\n";
        return kUsage;
    }

    auto* cmd = app.get_subcommands().front();
    const std::string name = cmd->get_name();
    auto set = [](CLI::Option* o) { return o->count() > 0; };
    try {
        CliConfig c;
        if (!config_file.empty()) {
            c = CliConfig::from_file(config_file);
            if (!c.command.empty() && c.command != name) {
                throw UsageError("config file is for '" + c.command + "', not '" + name + "'");
            }
        }
        c.command = name;
        if (name == "gen-data") {
            if (set(o_gen_out)) c.out = gen_out;
            if (set(o_gen_seed)) c.gen.seed = gen_seed;
            if (set(o_classes)) c.gen.classes = classes;
            if (set(o_instances)) c.gen.instances = instances;
            if (set(o_views)) c.gen.views = views;
            if (set(o_profile)) c.gen.target = data::DomainProfile::by_name(gen_profile);
            if (set(o_voxel)) c.gen.voxel_size = voxel;
            if (set(o_image)) c.gen.image_size = image;
            if (set(o_fraction)) c.gen.train_fraction = train_fraction;
            if (set(o_threads)) c.threads = threads;
            if (set(o_force)) c.force = force;
            return cmd_gen_data(c, out);
        }
        if (name == "train") {
            if (set(o_tr_data)) c.data = tr_data;
            if (set(o_tr_out)) c.out = tr_out;
            if (set(o_method)) c.train.apply_method(train::method_from_string(method));
            if (set(o_epochs)) c.train.epochs = epochs;
            if (set(o_tr_seed)) c.train.seed = tr_seed;
            if (set(o_batch)) c.train.batch_size = batch;
            if (set(o_lr)) c.train.adam.lr = lr;
            if (set(o_grl)) c.train.grl = train::grl_schedule_from_string(grl_mode);
            if (set(o_lambda)) c.train.weights.grl_lambda = grl_lambda;
            if (set(o_eval_every)) c.train.eval_every = eval_every;
            if (set(o_ckpt_every)) c.train.checkpoint_every = ckpt_every;
            return cmd_train(c, out);
        }
        if (name == "eval") {
            if (set(o_ev_ckpt)) c.checkpoint = ev_ckpt;
            if (set(o_ev_data)) c.data = ev_data;
            if (set(o_ev_out)) c.out = ev_out;
            if (set(o_threshold)) c.eval.threshold = threshold;
            if (set(o_split)) c.eval.split = data::split_from_string(split);
            if (set(o_domain)) c.eval.domain = metrics::domain_selector_from_string(domain);
            return cmd_eval(c, out);
        }
        if (set(o_em_ckpt)) c.checkpoint = em_ckpt;
        if (set(o_em_data)) c.data = em_data;
        if (set(o_em_out)) c.out = em_out;
        if (set(o_count)) c.embed_count = count;
        if (set(o_em_split)) c.eval.split = data::split_from_string(em_split);
        if (set(o_svg)) c.embed_svg = svg;
        return cmd_embed(c, out);
    } catch (const losses::NumericalError& e) {
        err << "numerical failure in " << e.part() << ": " << e.what() << "\n";
        return kNumerical;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const train::ConfigMismatchError& e) {
        err << "error: incompatible checkpoint: " << e.what() << "\n";
        return kUsage;
    } catch (const data::DatasetError& e) {
        err << "error: dataset: " << e.what() << "\n";
        return kIo;
    } catch (const nn::CheckpointError& e) {
        err << "error: checkpoint: " << e.what() << "\n";
        return kIo;
    } catch (const json::exception& e) {
        err << "error: config: " << e.what() << "\n";
        return kUsage;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::out_of_range& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kIo;
    }
}

}  // namespace vxda::cli
