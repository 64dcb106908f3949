#include "deepsca/trace_io.hpp"

#include <H5Cpp.h>

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <sstream>

#include "deepsca/error.hpp"
#include "h5_untimed.hpp"

namespace deepsca {
namespace {

struct SilenceHdf5 {
  SilenceHdf5() { H5::Exception::dontPrint(); }
};
const SilenceHdf5 kSilence;

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::vector<hsize_t> dims_of(const H5::DataSet& ds) {
  const H5::DataSpace space = ds.getSpace();
  std::vector<hsize_t> dims(static_cast<std::size_t>(space.getSimpleExtentNdims()));
  space.getSimpleExtentDims(dims.data());
  return dims;
}

bool has_link(const H5::Group& g, const std::string& name) {
  return H5Lexists(g.getId(), name.c_str(), H5P_DEFAULT) > 0;
}

ByteMatrix read_byte_matrix(const H5::Group& g, const std::string& name) {
  const H5::DataSet ds = g.openDataSet(name);
  if (ds.getTypeClass() != H5T_INTEGER) throw DataError(name, "must be an integer array");
  const auto dims = dims_of(ds);
  ByteMatrix m;
  if (dims.size() == 1) {
    m.rows = 1;
    m.cols = dims[0];
  } else if (dims.size() == 2) {
    m.rows = dims[0];
    m.cols = dims[1];
  } else {
    throw DataError(name, "must be 1- or 2-dimensional");
  }
  std::vector<long long> wide(m.rows * m.cols);
  ds.read(wide.data(), H5::PredType::NATIVE_LLONG);
  m.data.resize(wide.size());
  for (std::size_t i = 0; i < wide.size(); ++i) {
    if (wide[i] < 0 || wide[i] > 255) {
      throw DataError(name, "value " + std::to_string(wide[i]) + " outside [0, 255]");
    }
    m.data[i] = static_cast<std::uint8_t>(wide[i]);
  }
  return m;
}

void write_bytes(H5::Group& g, const std::string& name, const ByteMatrix& m, bool as_vector) {
  std::vector<hsize_t> dims = as_vector ? std::vector<hsize_t>{m.cols}
                                        : std::vector<hsize_t>{m.rows, m.cols};
  H5::DataSpace space(static_cast<int>(dims.size()), dims.data());
  H5::DataSet ds = g.createDataSet(name, H5::PredType::STD_U8LE, space,
                                   detail::untimed_dataset_props());
  ds.write(m.data.data(), H5::PredType::NATIVE_UINT8);
}

std::vector<float> read_samples(const H5::DataSet& ds, const std::string& name,
                                std::size_t& n, std::size_t& d) {
  const auto dims = dims_of(ds);
  if (dims.size() != 2) throw DataError(name, "must be a 2-dimensional N x D array");
  if (ds.getTypeClass() != H5T_INTEGER && ds.getTypeClass() != H5T_FLOAT) {
    throw DataError(name, "must be numeric");
  }
  n = dims[0];
  d = dims[1];
  std::vector<float> out(n * d);
  ds.read(out.data(), H5::PredType::NATIVE_FLOAT);
  return out;
}

template <typename F>
auto wrap_hdf5(const std::filesystem::path& path, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const H5::Exception& e) {
    throw DataError(path.string(), "HDF5 error in " + e.getFuncName() + ": " + e.getDetailMsg());
  }
}

}  // namespace

void save_canonical(const std::filesystem::path& path, const TraceSet& ts) {
  ts.validate();
  wrap_hdf5(path, [&] {
    H5::H5File file(path.string(), H5F_ACC_TRUNC);
    hsize_t sdims[2] = {ts.n_traces, ts.n_samples};
    H5::DataSpace sspace(2, sdims);
    H5::DataSet samples = file.createDataSet("samples", H5::PredType::IEEE_F32LE, sspace,
                                                 detail::untimed_dataset_props());
    samples.write(ts.samples.data(), H5::PredType::NATIVE_FLOAT);
    write_bytes(file, "plaintexts", ts.plaintexts, false);
    if (ts.ciphertexts) write_bytes(file, "ciphertexts", *ts.ciphertexts, false);
    if (ts.masks) write_bytes(file, "masks", *ts.masks, false);
    write_bytes(file, "key", ts.keys, ts.keys.rows == 1);

    H5::DataSpace scalar(H5S_SCALAR);
    const int version = kCanonicalSchemaVersion;
    file.createAttribute("schema_version", H5::PredType::STD_I32LE, scalar)
        .write(H5::PredType::NATIVE_INT, &version);
    H5::StrType str(H5::PredType::C_S1, H5T_VARIABLE);
    file.createAttribute("source_tag", str, scalar).write(str, ts.source_tag);
  });
}

TraceSet load_canonical(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError(path.string(), "file does not exist");
  return wrap_hdf5(path, [&] {
    H5::H5File file(path.string(), H5F_ACC_RDONLY);
    if (!file.attrExists("schema_version")) {
      throw DataError("schema_version", "attribute missing; not a canonical trace container");
    }
    int version = 0;
    file.openAttribute("schema_version").read(H5::PredType::NATIVE_INT, &version);
    if (version != kCanonicalSchemaVersion) {
      throw DataError("schema_version", "unsupported version " + std::to_string(version));
    }
    for (const char* required : {"samples", "plaintexts", "key"}) {
      if (!has_link(file, required)) throw DataError(required, "dataset missing");
    }
    TraceSet ts;
    ts.samples = read_samples(file.openDataSet("samples"), "samples", ts.n_traces, ts.n_samples);
    ts.plaintexts = read_byte_matrix(file, "plaintexts");
    if (has_link(file, "ciphertexts")) ts.ciphertexts = read_byte_matrix(file, "ciphertexts");
    if (has_link(file, "masks")) ts.masks = read_byte_matrix(file, "masks");
    ts.keys = read_byte_matrix(file, "key");
    if (file.attrExists("source_tag")) {
      H5::Attribute a = file.openAttribute("source_tag");
      H5::StrType str(H5::PredType::C_S1, H5T_VARIABLE);
      a.read(str, ts.source_tag);
    }
    ts.validate();
    return ts;
  });
}

namespace {

struct CompoundField {
  std::string name;  // as stored in the file
  std::size_t width = 0;
};

std::optional<CompoundField> find_field(const H5::CompType& type,
                                        std::initializer_list<const char*> aliases) {
  for (int i = 0; i < type.getNmembers(); ++i) {
    const std::string member = type.getMemberName(static_cast<unsigned>(i));
    const std::string l = lower(member);
    for (const char* alias : aliases) {
      if (l == alias) {
        CompoundField f{member, 1};
        if (type.getMemberClass(static_cast<unsigned>(i)) == H5T_ARRAY) {
          const H5::ArrayType at = type.getMemberArrayType(static_cast<unsigned>(i));
          std::vector<hsize_t> adims(static_cast<std::size_t>(at.getArrayNDims()));
          at.getArrayDims(adims.data());
          f.width = 1;
          for (auto v : adims) f.width *= v;
        }
        return f;
      }
    }
  }
  return std::nullopt;
}

ByteMatrix read_compound_field(const H5::DataSet& ds, std::size_t n, const CompoundField& f) {
  ByteMatrix m(n, f.width);
  H5::CompType mem(f.width);
  if (f.width == 1) {
    mem.insertMember(f.name, 0, H5::PredType::NATIVE_UINT8);
  } else {
    hsize_t w = f.width;
    mem.insertMember(f.name, 0, H5::ArrayType(H5::PredType::NATIVE_UINT8, 1, &w));
  }
  ds.read(m.data.data(), mem);
  return m;
}

std::string member_list(const H5::CompType& type) {
  std::string out;
  for (int i = 0; i < type.getNmembers(); ++i) {
    if (!out.empty()) out += ", ";
    out += type.getMemberName(static_cast<unsigned>(i));
  }
  return out;
}

}  // namespace

TraceSet load_ascad_hdf5(const std::filesystem::path& path, const std::string& group_name) {
  if (!std::filesystem::exists(path)) throw DataError(path.string(), "file does not exist");
  return wrap_hdf5(path, [&] {
    H5::H5File file(path.string(), H5F_ACC_RDONLY);
    if (!has_link(file, group_name)) throw DataError(group_name, "group not found");
    H5::Group g = file.openGroup(group_name);
    if (!has_link(g, "traces")) throw DataError(group_name + "/traces", "dataset missing");
    if (!has_link(g, "metadata")) throw DataError(group_name + "/metadata", "dataset missing");

    TraceSet ts;
    ts.source_tag = "ascad:" + path.filename().string() + ":" + group_name;
    ts.samples = read_samples(g.openDataSet("traces"), "traces", ts.n_traces, ts.n_samples);

    const H5::DataSet meta = g.openDataSet("metadata");
    if (meta.getTypeClass() != H5T_COMPOUND) throw DataError("metadata", "must be a compound array");
    const auto mdims = dims_of(meta);
    if (mdims.size() != 1 || mdims[0] != ts.n_traces) {
      throw DataError("metadata", "expected one record per trace");
    }
    const H5::CompType type = meta.getCompType();
    const auto pt = find_field(type, {"plaintext", "plaintexts", "pt", "ptxt"});
    const auto ct = find_field(type, {"ciphertext", "ciphertexts", "ct", "ctxt"});
    const auto key = find_field(type, {"key", "keys"});
    const auto mask = find_field(type, {"masks", "mask"});
    if (!pt) throw DataError("plaintexts", "no plaintext field; metadata has: " + member_list(type));
    if (!key) throw DataError("key", "no key field; metadata has: " + member_list(type));

    ts.plaintexts = read_compound_field(meta, ts.n_traces, *pt);
    if (ct) ts.ciphertexts = read_compound_field(meta, ts.n_traces, *ct);
    if (mask) ts.masks = read_compound_field(meta, ts.n_traces, *mask);
    ts.keys = read_compound_field(meta, ts.n_traces, *key);
    if (ts.has_fixed_key()) {
      ByteMatrix k(1, 16);
      std::copy_n(ts.keys.row(0).begin(), 16, k.data.begin());
      ts.keys = std::move(k);
    }
    ts.validate();
    return ts;
  });
}

void write_ascad_hdf5(const std::filesystem::path& path, const TraceSet& profiling,
                      const TraceSet& attack) {
  profiling.validate();
  attack.validate();
  wrap_hdf5(path, [&] {
    H5::H5File file(path.string(), H5F_ACC_TRUNC);
    auto write_group = [&](const std::string& name, const TraceSet& ts) {
      H5::Group g = detail::create_untimed_group(file, name);
      hsize_t sdims[2] = {ts.n_traces, ts.n_samples};
      H5::DataSpace sspace(2, sdims);
      g.createDataSet("traces", H5::PredType::IEEE_F32LE, sspace, detail::untimed_dataset_props())
          .write(ts.samples.data(), H5::PredType::NATIVE_FLOAT);

      struct Field {
        std::string name;
        const ByteMatrix* m;
        ByteMatrix expanded;
      };
      std::vector<Field> fields;
      fields.push_back({"plaintext", &ts.plaintexts, {}});
      if (ts.ciphertexts) fields.push_back({"ciphertext", &*ts.ciphertexts, {}});
      Field key{"key", nullptr, ByteMatrix(ts.n_traces, 16)};
      for (std::size_t i = 0; i < ts.n_traces; ++i) {
        std::copy_n(ts.key_of(i).begin(), 16, key.expanded.data.begin() + i * 16);
      }
      fields.push_back(std::move(key));
      if (ts.masks) fields.push_back({"masks", &*ts.masks, {}});

      std::size_t record = 0;
      for (auto& f : fields) record += (f.m ? f.m->cols : f.expanded.cols);
      H5::CompType file_type(record);
      std::size_t offset = 0;
      for (auto& f : fields) {
        hsize_t w = f.m ? f.m->cols : f.expanded.cols;
        file_type.insertMember(f.name, offset, H5::ArrayType(H5::PredType::NATIVE_UINT8, 1, &w));
        offset += w;
      }
      std::vector<std::uint8_t> buf(record * ts.n_traces);
      for (std::size_t i = 0; i < ts.n_traces; ++i) {
        std::size_t off = 0;
        for (auto& f : fields) {
          const ByteMatrix& m = f.m ? *f.m : f.expanded;
          std::copy_n(m.row(i).begin(), m.cols, buf.begin() + i * record + off);
          off += m.cols;
        }
      }
      hsize_t mdims[1] = {ts.n_traces};
      H5::DataSpace mspace(1, mdims);
      g.createDataSet("metadata", file_type, mspace, detail::untimed_dataset_props()).write(buf.data(), file_type);
    };
    write_group(kAscadProfilingGroup, profiling);
    write_group(kAscadAttackGroup, attack);
  });
}

std::vector<std::string> describe_hdf5(const std::filesystem::path& path) {
  return wrap_hdf5(path, [&] {
    H5::H5File file(path.string(), H5F_ACC_RDONLY);
    std::vector<std::string> out;
    struct Ctx {
      std::vector<std::string>* out;
    } ctx{&out};
    H5Ovisit(
        file.getId(), H5_INDEX_NAME, H5_ITER_NATIVE,
        [](hid_t, const char* name, const H5O_info_t* info, void* data) -> herr_t {
          auto* c = static_cast<Ctx*>(data);
          if (std::strcmp(name, ".") == 0) return 0;
          c->out->push_back(std::string(info->type == H5O_TYPE_GROUP ? "group   " : "dataset ") +
                            name);
          return 0;
        },
        &ctx);
    return out;
  });
}

RawSampleType parse_raw_sample_type(const std::string& name) {
  if (name == "int8") return RawSampleType::kInt8;
  if (name == "uint8") return RawSampleType::kUInt8;
  if (name == "int16") return RawSampleType::kInt16;
  if (name == "float32") return RawSampleType::kFloat32;
  if (name == "float64") return RawSampleType::kFloat64;
  throw ConfigError("sample_type", "unknown sample type '" + name + "'");
}

namespace {

std::vector<std::uint8_t> parse_hex(const std::string& s, const std::string& field) {
  if (s.size() % 2 != 0) throw DataError(field, "odd-length hex string '" + s + "'");
  std::vector<std::uint8_t> out(s.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(s.substr(2 * i, 2), &used, 16);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != 2) throw DataError(field, "invalid hex string '" + s + "'");
    out[i] = static_cast<std::uint8_t>(v);
  }
  return out;
}

}  // namespace

TraceSet import_raw(const RawImportConfig& cfg) {
  if (cfg.n_samples == 0) throw ConfigError("n_samples", "must be >= 1");
  std::ifstream in(cfg.samples_path, std::ios::binary);
  if (!in) throw ConfigError("samples_path", "cannot open " + cfg.samples_path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::size_t width = 0;
  switch (cfg.sample_type) {
    case RawSampleType::kInt8:
    case RawSampleType::kUInt8: width = 1; break;
    case RawSampleType::kInt16: width = 2; break;
    case RawSampleType::kFloat32: width = 4; break;
    case RawSampleType::kFloat64: width = 8; break;
  }
  const std::size_t row_bytes = width * cfg.n_samples;
  if (raw.size() % row_bytes != 0) {
    throw DataError("samples", "file size is not a multiple of one trace (" +
                                   std::to_string(row_bytes) + " bytes)");
  }
  TraceSet ts;
  ts.source_tag = cfg.source_tag;
  ts.n_traces = raw.size() / row_bytes;
  ts.n_samples = cfg.n_samples;
  ts.samples.resize(ts.n_traces * ts.n_samples);
  for (std::size_t i = 0; i < ts.samples.size(); ++i) {
    const char* p = raw.data() + i * width;
    switch (cfg.sample_type) {
      case RawSampleType::kInt8: ts.samples[i] = static_cast<std::int8_t>(*p); break;
      case RawSampleType::kUInt8: ts.samples[i] = static_cast<std::uint8_t>(*p); break;
      case RawSampleType::kInt16: {
        std::int16_t v;
        std::memcpy(&v, p, 2);
        ts.samples[i] = v;
        break;
      }
      case RawSampleType::kFloat32: std::memcpy(&ts.samples[i], p, 4); break;
      case RawSampleType::kFloat64: {
        double v;
        std::memcpy(&v, p, 8);
        ts.samples[i] = static_cast<float>(v);
        break;
      }
    }
  }

  std::ifstream meta(cfg.metadata_path);
  if (!meta) throw ConfigError("metadata_path", "cannot open " + cfg.metadata_path.string());
  ts.plaintexts = ByteMatrix(ts.n_traces, 16);
  ByteMatrix keys(ts.n_traces, 16);
  bool has_ct = false;
  bool has_key = false;
  bool has_mask = false;
  ByteMatrix ct(ts.n_traces, 16);
  ByteMatrix masks;
  std::string line;
  std::size_t row = 0;
  while (std::getline(meta, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (row >= ts.n_traces) throw DataError("metadata", "more index lines than traces");
    std::istringstream ls(line);
    for (const auto& col : cfg.columns) {
      std::string tok;
      if (!(ls >> tok)) {
        throw DataError("metadata", "line " + std::to_string(row + 1) + " is missing column " + col);
      }
      if (col == "skip") continue;
      const auto bytes = parse_hex(tok, col);
      auto put16 = [&](ByteMatrix& m) {
        if (bytes.size() != 16) throw DataError(col, "expected 16 bytes, got " + std::to_string(bytes.size()));
        std::copy(bytes.begin(), bytes.end(), m.data.begin() + row * 16);
      };
      if (col == "plaintext") {
        put16(ts.plaintexts);
      } else if (col == "ciphertext") {
        put16(ct);
        has_ct = true;
      } else if (col == "key") {
        put16(keys);
        has_key = true;
      } else if (col == "mask") {
        if (!has_mask) masks = ByteMatrix(ts.n_traces, bytes.size());
        if (bytes.size() != masks.cols) throw DataError("masks", "inconsistent mask width");
        std::copy(bytes.begin(), bytes.end(), masks.data.begin() + row * masks.cols);
        has_mask = true;
      } else {
        throw ConfigError("columns", "unknown metadata column '" + col + "'");
      }
    }
    ++row;
  }
  if (row != ts.n_traces) {
    throw DataError("metadata", std::to_string(row) + " index lines for " +
                                    std::to_string(ts.n_traces) + " traces");
  }
  if (!has_key) throw DataError("key", "no key column configured");
  ts.keys = std::move(keys);
  if (ts.has_fixed_key()) {
    ByteMatrix k(1, 16);
    std::copy_n(ts.keys.row(0).begin(), 16, k.data.begin());
    ts.keys = std::move(k);
  }
  if (has_ct) ts.ciphertexts = std::move(ct);
  if (has_mask) ts.masks = std::move(masks);
  ts.validate();
  return ts;
}

std::string dataset_hash(const TraceSet& ts) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::uint64_t shape[2] = {ts.n_traces, ts.n_samples};
  mix(shape, sizeof shape);
  mix(ts.samples.data(), ts.samples.size() * sizeof(float));
  mix(ts.plaintexts.data.data(), ts.plaintexts.data.size());
  if (ts.ciphertexts) mix(ts.ciphertexts->data.data(), ts.ciphertexts->data.size());
  if (ts.masks) mix(ts.masks->data.data(), ts.masks->data.size());
  mix(ts.keys.data.data(), ts.keys.data.size());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace deepsca
