#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "json.hpp"
#include "tstok/data.hpp"
#include "tstok/forecaster.hpp"
#include "tstok/synthetic.hpp"
#include "tstok/vqvae.hpp"

namespace tstok {

using Json = nlohmann::ordered_json;

inline constexpr int kCheckpointFormatVersion = 1;

Json to_json(const VqVaeConfig& c);
VqVaeConfig vqvae_config_from_json(const Json& j, VqVaeConfig base = {});
Json to_json(const ForecasterConfig& c);
ForecasterConfig forecaster_config_from_json(const Json& j, ForecasterConfig base = {});
Json to_json(const SyntheticSpec& s);
SyntheticSpec synthetic_spec_from_json(const Json& j, SyntheticSpec base = {});

/// {"mask": [[0|1, ...], ...], "ratio": r}; 1 = observed.
Json to_json(const MaskSpec& m);
MaskSpec mask_from_json(const Json& j);
/// {"train": [b, e], "val": [b, e], "test": [b, e], "window_length": w, "stride": s}
Json to_json(const SplitSpec& s);
SplitSpec split_from_json(const Json& j);

Json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const Json& j);

struct Checkpoint {
  std::unique_ptr<VqVae> tokenizer;
  std::unique_ptr<Forecaster> forecaster;
};

/// {"format_version","config","codebook","encoder","decoder","rng_state"[,"forecaster"]}
Json checkpoint_json(const VqVae& model, const Forecaster* forecaster = nullptr);
Checkpoint checkpoint_from_json(const Json& j);

std::string dump_json(const Json& j);
/// Single-line form used for checkpoints.
std::string dump_json_compact(const Json& j);
Json read_json_file(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const VqVae& model,
                     const Forecaster* forecaster = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tstok
