#pragma once

#include <H5Cpp.h>

#include <string>

// Objects created without modification times, so rewriting identical content
// yields identical files.
namespace deepsca::detail {

inline H5::DSetCreatPropList untimed_dataset_props() {
  H5::DSetCreatPropList p;
  H5Pset_obj_track_times(p.getId(), 0);
  return p;
}

inline H5::Group create_untimed_group(const H5::H5Location& loc, const std::string& name) {
  hid_t gcpl = H5Pcreate(H5P_GROUP_CREATE);
  H5Pset_obj_track_times(gcpl, 0);
  hid_t id = H5Gcreate2(loc.getId(), name.c_str(), H5P_DEFAULT, gcpl, H5P_DEFAULT);
  H5Pclose(gcpl);
  if (id < 0) throw H5::GroupIException("create_untimed_group", "cannot create " + name);
  H5::Group g(id);
  H5Gclose(id);
  return g;
}

}  // namespace deepsca::detail
