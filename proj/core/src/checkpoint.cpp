#include "metadet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "metadet/util.hpp"

namespace metadet {

namespace {

constexpr const char* kMagic = "metadet-checkpoint v1";

[[noreturn]] void bad(const std::string& path, const std::string& why) {
  throw std::runtime_error("checkpoint " + path + ": " + why);
}

// Host is assumed little-endian (x86/aarch64 targets); guard at compile time.
static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

}  // namespace

void save_checkpoint(const ParamStore& params, const std::string& path) {
  if (params.tensors.empty()) bad(path, "refusing to save an empty parameter store");
  std::ostringstream head;
  head << kMagic << "\n";
  uint64_t offset = 0;
  for (const auto& [name, t] : params.tensors) {
    if (name.find(' ') != std::string::npos || name.find('\n') != std::string::npos)
      bad(path, "parameter name contains whitespace: " + name);
    head << "tensor " << name << " ";
    for (size_t i = 0; i < t.shape.size(); ++i) {
      if (i) head << ",";
      head << t.shape[i];
    }
    head << " " << offset << "\n";
    offset += uint64_t(t.size()) * sizeof(float);
  }
  head << "data " << offset << "\n";

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) bad(path, "cannot open for writing");
  out << head.str();
  for (const auto& [name, t] : params.tensors) {
    (void)name;
    out.write(reinterpret_cast<const char*>(t.data.data()),
              std::streamsize(t.data.size() * sizeof(float)));
  }
  if (!out) bad(path, "short write");
}

ParamStore load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) bad(path, "cannot open");
  std::string line;
  if (!std::getline(in, line) || line != kMagic) bad(path, "bad magic line");

  struct Entry {
    std::string name;
    std::vector<int> shape;
    uint64_t offset;
  };
  std::vector<Entry> entries;
  uint64_t declared_bytes = 0;
  bool saw_data = false;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string kind;
    ss >> kind;
    if (kind == "tensor") {
      Entry e;
      std::string dims;
      if (!(ss >> e.name >> dims >> e.offset))
        bad(path, "malformed tensor line " + std::to_string(lineno));
      for (const std::string& d : split(dims, ',')) {
        size_t pos = 0;
        int v = std::stoi(d, &pos);
        if (pos != d.size() || v <= 0)
          bad(path, "bad dimension '" + d + "' on line " + std::to_string(lineno));
        e.shape.push_back(v);
      }
      entries.push_back(std::move(e));
    } else if (kind == "data") {
      if (!(ss >> declared_bytes)) bad(path, "malformed data line");
      saw_data = true;
      break;
    } else {
      bad(path, "unknown manifest entry '" + kind + "' on line " + std::to_string(lineno));
    }
  }
  if (!saw_data) bad(path, "missing data line");
  if (entries.empty()) bad(path, "no tensors in manifest");

  uint64_t expect = 0;
  for (const Entry& e : entries) {
    if (e.offset != expect)
      bad(path, "tensor " + e.name + " has offset " + std::to_string(e.offset) +
                    ", expected " + std::to_string(expect));
    expect += uint64_t(Tensor::count(e.shape)) * sizeof(float);
  }
  if (expect != declared_bytes)
    bad(path, "data size " + std::to_string(declared_bytes) + " does not match manifest total " +
                  std::to_string(expect));

  ParamStore store;
  for (const Entry& e : entries) {
    Tensor t(e.shape);
    in.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(t.data.size() * sizeof(float)));
    if (in.gcount() != std::streamsize(t.data.size() * sizeof(float)))
      bad(path, "truncated data section at tensor " + e.name);
    store.add(e.name, std::move(t));
  }
  char extra;
  if (in.read(&extra, 1) && in.gcount() == 1) bad(path, "trailing bytes after data section");
  return store;
}

}  // namespace metadet
