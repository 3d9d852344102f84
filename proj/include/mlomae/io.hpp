#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <optional>
#include <string>

#include "mlomae/data.hpp"
#include "mlomae/mlo.hpp"

namespace mlomae {

// Everything a run needs. Serialized as a flat `key = value` file with `#`
// comments; keys are the MloConfig / ModelDims field names, synthetic-data
// overrides use a `synth_` prefix.
struct RunConfig {
  MloConfig mlo;
  ModelDims dims;
  std::string dataset = "synthetic";  // or "cifar10:<path>"
  SynthSpec synth;
  std::optional<std::size_t> cifar_limit;
  std::string output_dir = "run";
  long checkpoint_every = 0;  // outer steps; 0 writes only init and final
  long probe_epochs = 100;
  double probe_lr = 1e-2;

  void validate() const;
};

RunConfig parse_config(std::istream& is, const std::string& source = "<config>");
RunConfig load_config(const std::string& path);
std::string serialize_config(const RunConfig& cfg);

// Synthetic spec aligned with the model geometry of `cfg`.
SynthSpec effective_synth(const RunConfig& cfg);
DatasetBundle load_dataset(const RunConfig& cfg);

// --- metrics -------------------------------------------------------------

inline constexpr const char* kMetricsHeader =
    "step,epoch,recon_loss,train_cls_loss,val_cls_loss,val_accuracy,mask_ratio,lr_E,lr_C,lr_T,wallclock_ms";

std::string format_metrics_row(const MetricsRow& row);

// Appends rows and flushes after each one.
class MetricsWriter {
 public:
  // `append` keeps existing content (resume); otherwise the file is
  // truncated and the header written.
  MetricsWriter(const std::filesystem::path& path, bool append);
  void write(const MetricsRow& row);

 private:
  std::ofstream out_;
  long last_step_ = -1;
};

// --- checkpoints ---------------------------------------------------------

TensorMap checkpoint_tensors(const TrainState& s, std::uint64_t seed);
TrainState restore_checkpoint(const TensorMap& t, std::uint64_t* seed = nullptr);
void save_checkpoint(const std::string& path, const TrainState& s, std::uint64_t seed);
TrainState load_checkpoint(const std::string& path, std::uint64_t* seed = nullptr);

// --- visualization -------------------------------------------------------

// Binary PGM (P5), maxval 255.
void write_pgm(const std::filesystem::path& path, Index width, Index height,
               const std::vector<std::uint8_t>& pixels);
std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, Index* width, Index* height);

// Per-pixel map where every patch block holds round(255·σ).
std::vector<std::uint8_t> probability_map(const ModelDims& dims, const Eigen::RowVectorXd& probs);
// Masked blocks 0, visible blocks 255.
std::vector<std::uint8_t> mask_overlay(const ModelDims& dims, const MaskSelection& sel);

// --- run directory lock --------------------------------------------------

class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

}  // namespace mlomae
