#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

#include "mlomae/io.hpp"

namespace mlomae {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitIo = 2, kExitOracle = 3, kExitNumeric = 4 };

// Trains a fresh linear head on frozen, mean-pooled encoder features of d_tr
// (full-batch AdamW without decay, `epochs` steps) and returns d_val accuracy.
double linear_probe(const ModelDims& dims, const ParamSet& encoder, const DatasetBundle& bundle, long epochs,
                    double lr, std::uint64_t seed);

// Mean σ over informative positions minus mean σ over the rest, averaged
// over the given images.
double informative_sigma_gap(const ModelDims& dims, const ParamSet& masking, const std::vector<Matrix>& images,
                             const IndexList& informative);

struct TrainOptions {
  std::string config_path;
  bool strict = true;
  std::optional<std::string> resume;
};

// Each command returns an ExitCode and reports to `out` / `err`.
int cmd_train(const TrainOptions& opt, std::ostream& out, std::ostream& err);
int cmd_gradcheck(bool flip_c_path_sign, std::ostream& out, std::ostream& err);
int cmd_probe(const std::string& ckpt, const std::string& data, const std::optional<std::string>& config_path,
              std::ostream& out, std::ostream& err);
int cmd_visualize(const std::string& ckpt, const std::string& out_dir, const std::optional<std::string>& config_path,
                  std::size_t count, std::ostream& out, std::ostream& err);

// Checkpoint file names inside a run directory.
std::string init_checkpoint_name();
std::string final_checkpoint_name();
std::string step_checkpoint_name(long step);

}  // namespace mlomae
