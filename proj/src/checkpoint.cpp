#include "deepsca/checkpoint.hpp"

#include <H5Cpp.h>

#include <fstream>
#include <iomanip>

#include "deepsca/config_json.hpp"
#include "deepsca/error.hpp"
#include "h5_untimed.hpp"

namespace deepsca {
namespace {

void write_string_attr(H5::H5Object& obj, const char* name, const std::string& value) {
  H5::StrType str(H5::PredType::C_S1, H5T_VARIABLE);
  H5::Attribute a = obj.createAttribute(name, str, H5::DataSpace(H5S_SCALAR));
  a.write(str, value);
}

std::string read_string_attr(const H5::H5Object& obj, const char* name) {
  if (!obj.attrExists(name)) throw DataError(name, "checkpoint attribute missing");
  H5::Attribute a = obj.openAttribute(name);
  H5::StrType str(H5::PredType::C_S1, H5T_VARIABLE);
  std::string out;
  a.read(str, out);
  return out;
}

void write_doubles(H5::Group& g, const std::string& name, const Shape& shape,
                   const std::vector<double>& data) {
  std::vector<hsize_t> dims(shape.begin(), shape.end());
  if (dims.empty()) dims.push_back(data.size());
  H5::DataSpace space(static_cast<int>(dims.size()), dims.data());
  H5::DataSet ds = g.createDataSet(name, H5::PredType::NATIVE_DOUBLE, space,
                                    detail::untimed_dataset_props());
  ds.write(data.data(), H5::PredType::NATIVE_DOUBLE);
}

Tensor read_doubles(const H5::Group& g, const std::string& name) {
  if (!g.nameExists(name)) throw DataError(name, "dataset missing from checkpoint");
  H5::DataSet ds = g.openDataSet(name);
  H5::DataSpace space = ds.getSpace();
  const int rank = space.getSimpleExtentNdims();
  std::vector<hsize_t> dims(static_cast<std::size_t>(rank));
  space.getSimpleExtentDims(dims.data());
  Tensor t(Shape(dims.begin(), dims.end()));
  ds.read(t.data.data(), H5::PredType::NATIVE_DOUBLE);
  return t;
}

Json parse_json(const std::string& text, const char* field) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(field, std::string("invalid JSON: ") + e.what());
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainedModel& model) {
  if (!model.graph.config()) {
    throw ConfigError("network", "only graphs built from a NetworkConfig can be checkpointed");
  }
  H5::Exception::dontPrint();
  try {
    H5::H5File file(path.string(), H5F_ACC_TRUNC);
    H5::Group root = file.openGroup("/");
    H5::Attribute v = root.createAttribute("format_version", H5::PredType::NATIVE_INT,
                                           H5::DataSpace(H5S_SCALAR));
    const int version = kCheckpointFormatVersion;
    v.write(H5::PredType::NATIVE_INT, &version);

    Json history = Json::array();
    for (const auto& e : model.history) history.push_back(to_json(e));
    write_string_attr(root, "network", to_json(*model.graph.config()).dump());
    write_string_attr(root, "training", to_json(model.training).dump());
    write_string_attr(root, "history", history.dump());
    write_string_attr(root, "provenance", to_json(model.provenance).dump());
    write_string_attr(root, "leakage",
                      model.leakage ? to_json(*model.leakage).dump() : std::string("null"));

    H5::Group params = detail::create_untimed_group(file, "params");
    const ParameterStore& store = model.graph.params();
    for (const auto& name : store.names()) {
      const Tensor& t = store.get(name);
      write_doubles(params, name, t.shape, t.data);
    }
    if (model.standardizer) {
      H5::Group sg = detail::create_untimed_group(file, "standardizer");
      write_doubles(sg, "mean", {model.standardizer->mean.size()}, model.standardizer->mean);
      write_doubles(sg, "scale", {model.standardizer->scale.size()}, model.standardizer->scale);
    }
  } catch (const H5::Exception& e) {
    throw DataError(path.string(), "HDF5 error in " + e.getFuncName() + ": " + e.getDetailMsg());
  }
}

TrainedModel load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError(path.string(), "checkpoint not found");
  H5::Exception::dontPrint();
  try {
    H5::H5File file(path.string(), H5F_ACC_RDONLY);
    H5::Group root = file.openGroup("/");
    if (!root.attrExists("format_version")) {
      throw DataError("format_version", "attribute missing; not a checkpoint");
    }
    int version = 0;
    root.openAttribute("format_version").read(H5::PredType::NATIVE_INT, &version);
    if (version != kCheckpointFormatVersion) {
      throw DataError("format_version", "unsupported version " + std::to_string(version));
    }

    NetworkConfig net;
    from_json(parse_json(read_string_attr(root, "network"), "network"), net);
    TrainingConfig training;
    from_json(parse_json(read_string_attr(root, "training"), "training"), training);

    TrainedModel model{build_attention_network(net), training, {}, {}, std::nullopt, std::nullopt};
    for (const auto& e : parse_json(read_string_attr(root, "history"), "history")) {
      EpochStats s;
      from_json(e, s);
      model.history.push_back(s);
    }
    from_json(parse_json(read_string_attr(root, "provenance"), "provenance"), model.provenance);
    Json leak = parse_json(read_string_attr(root, "leakage"), "leakage");
    if (!leak.is_null()) {
      LeakageModelSpec lm;
      from_json(leak, lm);
      model.leakage = lm;
    }

    H5::Group params = file.openGroup("/params");
    ParameterStore& store = model.graph.params();
    if (params.getNumObjs() != store.names().size()) {
      throw DataError("params", "parameter count does not match the network config");
    }
    for (const auto& name : store.names()) {
      Tensor t = read_doubles(params, name);
      Tensor& dst = store.get_mut(name);
      if (t.shape != dst.shape) {
        throw DataError("params/" + name, "shape " + shape_string(t.shape) + " expected " +
                                              shape_string(dst.shape));
      }
      dst = std::move(t);
    }
    if (file.nameExists("standardizer")) {
      H5::Group sg = file.openGroup("/standardizer");
      Standardizer s;
      s.mean = read_doubles(sg, "mean").data;
      s.scale = read_doubles(sg, "scale").data;
      model.standardizer = std::move(s);
    }
    return model;
  } catch (const H5::Exception& e) {
    throw DataError(path.string(), "HDF5 error in " + e.getFuncName() + ": " + e.getDetailMsg());
  } catch (const ConfigError& e) {
    throw DataError(e.field(), std::string("stored config is invalid: ") + e.what());
  }
}

void write_history_csv(const std::filesystem::path& path, std::span<const EpochStats> history) {
  std::ofstream out(path);
  if (!out) throw DataError(path.string(), "cannot open for writing");
  out << "epoch,loss,accuracy,val_loss,val_accuracy\n" << std::setprecision(10);
  for (const auto& e : history) {
    out << e.epoch << ',' << e.loss << ',' << e.accuracy << ',';
    if (e.val_loss) out << *e.val_loss;
    out << ',';
    if (e.val_accuracy) out << *e.val_accuracy;
    out << '\n';
  }
}

}  // namespace deepsca
