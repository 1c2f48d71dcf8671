#include "stcnet/binio.hpp"

#include <fstream>
#include <sstream>

namespace stcnet {

std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  if (f.bad()) throw FormatError("read failed: " + path);
  return std::move(ss).str();
}

void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open file for writing: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  f.flush();
  if (!f) throw FormatError("write failed: " + path);
}

}  // namespace stcnet
