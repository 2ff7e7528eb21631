#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vxda/data.hpp"
#include "vxda/metrics.hpp"
#include "vxda/trainer.hpp"

namespace vxda::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kNumerical = 3, kIo = 4 };

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Settings of one command after merging the config file and flags.
///
/// Config file layout (every key optional, unknown keys rejected, relative
/// paths resolved against the file's directory):
///   {"command": "train", "data": DIR, "out": PATH, "checkpoint": FILE,
///    "threads": N, "force": BOOL,
///    "gen": {"classes", "instances", "views", "voxel_size", "image_size",
///            "seed", "train_fraction", "target_profile": NAME | {...}},
///    "train": TrainConfig,
///    "eval": {"threshold", "split", "domain"},
///    "embed": {"count", "split", "svg"}}
struct CliConfig {
    std::string command;
    std::filesystem::path data;
    std::filesystem::path out;
    std::filesystem::path checkpoint;
    int threads = 0;
    bool force = false;
    data::GenConfig gen;
    train::TrainConfig train;
    metrics::EvalConfig eval;
    int embed_count = 48;  // per domain
    bool embed_svg = false;

    static CliConfig from_file(const std::filesystem::path& file);
};

/// Parses `args` (without the program name) and runs the command.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int cmd_gen_data(const CliConfig& config, std::ostream& out);
int cmd_train(const CliConfig& config, std::ostream& out);
int cmd_eval(const CliConfig& config, std::ostream& out);
int cmd_embed(const CliConfig& config, std::ostream& out);

/// Worker count for dataset generation: `requested` (0 = hardware), capped by
/// the VXDA_THREADS environment variable when set.
int generation_threads(int requested);

}  // namespace vxda::cli
