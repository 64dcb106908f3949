#pragma once

#include <filesystem>
#include <span>

#include "deepsca/training.hpp"

namespace deepsca {

inline constexpr int kCheckpointFormatVersion = 1;

/// HDF5 checkpoint: attributes format_version, network, training, history,
/// provenance and leakage (JSON strings); /params/<name> float64 datasets;
/// optional /standardizer/{mean,scale}.
void save_checkpoint(const std::filesystem::path& path, const TrainedModel& model);

/// Rebuilds the graph from the stored network config and restores every
/// parameter bit-exactly. Throws DataError for unreadable or mismatched files.
TrainedModel load_checkpoint(const std::filesystem::path& path);

/// epoch,loss,accuracy,val_loss,val_accuracy
void write_history_csv(const std::filesystem::path& path, std::span<const EpochStats> history);

}  // namespace deepsca
