#include "stcnet/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <map>

#include "stcnet/binio.hpp"
#include "stcnet/crc32.hpp"

namespace stcnet::ckpt {

namespace {

constexpr char kMagic[4] = {'S', 'T', 'C', 'K'};
constexpr uint32_t kVersion = 1;

NamedTensor meta_scalar(const std::string& name, double v) {
  Tensor<float> t({1});
  t.v[0] = static_cast<float>(v);
  return {name, std::move(t)};
}

NamedTensor meta_vector(const std::string& name, const std::vector<double>& vals) {
  Tensor<float> t({static_cast<int64_t>(vals.size())});
  for (size_t i = 0; i < vals.size(); ++i) t.v[i] = static_cast<float>(vals[i]);
  return {name, std::move(t)};
}

int meta_int(const std::map<std::string, Tensor<float>>& m, const std::string& name) {
  auto it = m.find(name);
  if (it == m.end()) throw FormatError("checkpoint: missing tensor " + name);
  if (it->second.numel() != 1) throw FormatError("checkpoint: " + name + " must be a scalar");
  return static_cast<int>(std::lround(static_cast<double>(it->second.v[0])));
}

const Tensor<float>& meta_tensor(const std::map<std::string, Tensor<float>>& m,
                                 const std::string& name) {
  auto it = m.find(name);
  if (it == m.end()) throw FormatError("checkpoint: missing tensor " + name);
  return it->second;
}

}  // namespace

std::string encode_stck(const std::vector<NamedTensor>& tensors) {
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xFFFF) throw ArgumentError("checkpoint: tensor name too long");
    put_u16(buf, static_cast<uint16_t>(t.name.size()));
    buf.append(t.name);
    if (t.value.rank() > 0xFF) throw ArgumentError("checkpoint: tensor rank too large");
    put_u8(buf, static_cast<uint8_t>(t.value.rank()));
    for (int64_t d = 0; d < t.value.rank(); ++d)
      put_u32(buf, static_cast<uint32_t>(t.value.dim(d)));
    for (float x : t.value.v) put_f32(buf, x);
  }
  put_u32(buf, crc32(buf.data(), buf.size()));
  return buf;
}

std::vector<NamedTensor> decode_stck(const std::string& bytes) {
  ByteReader r{bytes, 0, "checkpoint"};
  if (r.bytes(4, "magic") != std::string(kMagic, 4))
    throw FormatError("checkpoint: bad magic");
  uint32_t version = r.u32("version");
  if (version != kVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  uint32_t count = r.u32("tensor count");
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t nlen = r.u16("name length");
    std::string name = r.bytes(nlen, "name");
    uint8_t rank = r.u8("rank");
    std::vector<int64_t> dims(rank);
    int64_t numel = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      dims[d] = static_cast<int64_t>(r.u32("dims"));
      numel *= dims[d];
    }
    r.need(static_cast<size_t>(numel) * 4, "payload");
    Tensor<float> t(std::move(dims));
    for (int64_t j = 0; j < numel; ++j) t.v[static_cast<size_t>(j)] = r.f32("payload");
    out.push_back({std::move(name), std::move(t)});
  }
  size_t body = r.pos;
  uint32_t stored = r.u32("crc32");
  if (r.pos != bytes.size()) throw FormatError("checkpoint: trailing bytes after crc32");
  if (stored != crc32(bytes.data(), body)) throw FormatError("checkpoint: crc32 mismatch");
  return out;
}

void save_checkpoint(const std::string& path, const model::StcNet<float>& net, int epoch) {
  const model::ModelConfig& cfg = net.config();
  std::vector<NamedTensor> tensors;
  tensors.push_back(meta_scalar("meta/format", 1));
  tensors.push_back(meta_scalar("meta/epoch", epoch));
  tensors.push_back(meta_scalar("meta/in_channels", cfg.in_channels));
  tensors.push_back(meta_scalar("meta/num_classes", cfg.num_classes));
  tensors.push_back(meta_scalar("meta/sigma", cfg.sigma));
  tensors.push_back(meta_scalar("meta/stream", cfg.stream == model::Stream::kBone ? 1 : 0));
  std::vector<double> ch(cfg.block_channels.begin(), cfg.block_channels.end());
  tensors.push_back(meta_vector("meta/block_channels", ch));
  std::vector<double> st(cfg.temporal_strides.begin(), cfg.temporal_strides.end());
  tensors.push_back(meta_vector("meta/temporal_strides", st));
  std::vector<double> sb(cfg.stc_blocks.begin(), cfg.stc_blocks.end());
  tensors.push_back(meta_vector("meta/stc_blocks", sb));
  tensors.push_back(meta_vector(
      "meta/stc", {static_cast<double>(cfg.stc.k), cfg.stc.temperature,
                   static_cast<double>(cfg.stc.c_mid), cfg.stc.exclude_same_node ? 1.0 : 0.0,
                   cfg.stc.straight_line ? 1.0 : 0.0}));
  std::vector<double> gr;
  gr.push_back(cfg.skeleton.num_nodes);
  gr.push_back(cfg.skeleton.root);
  std::vector<int> par = cfg.skeleton.parents();
  for (int v = 0; v < cfg.skeleton.num_nodes; ++v)
    if (v != cfg.skeleton.root) gr.push_back(par[static_cast<size_t>(v)]);
  tensors.push_back(meta_vector("meta/graph", gr));

  const auto& ps = net.params();
  for (size_t i = 0; i < ps.size(); ++i)
    tensors.push_back({ps.at(i).name, ps.at(i).value});
  write_file_bytes(path, encode_stck(tensors));
}

model::StcNet<float> load_checkpoint(const std::string& path, int* epoch_out) {
  std::vector<NamedTensor> tensors = decode_stck(read_file_bytes(path));
  std::map<std::string, Tensor<float>> by_name;
  for (auto& t : tensors) {
    if (!by_name.emplace(t.name, std::move(t.value)).second)
      throw FormatError("checkpoint: duplicate tensor " + t.name);
  }

  if (meta_int(by_name, "meta/format") != 1)
    throw FormatError("checkpoint: unsupported meta format");
  model::ModelConfig cfg;
  cfg.in_channels = meta_int(by_name, "meta/in_channels");
  cfg.num_classes = meta_int(by_name, "meta/num_classes");
  cfg.sigma = meta_int(by_name, "meta/sigma");
  cfg.stream = meta_int(by_name, "meta/stream") == 1 ? model::Stream::kBone
                                                     : model::Stream::kJoint;
  const Tensor<float>& ch = meta_tensor(by_name, "meta/block_channels");
  const Tensor<float>& st = meta_tensor(by_name, "meta/temporal_strides");
  if (ch.numel() != 10 || st.numel() != 10)
    throw FormatError("checkpoint: block_channels and temporal_strides must have length 10");
  for (int i = 0; i < 10; ++i) {
    cfg.block_channels[static_cast<size_t>(i)] =
        static_cast<int>(std::lround(static_cast<double>(ch.v[static_cast<size_t>(i)])));
    cfg.temporal_strides[static_cast<size_t>(i)] =
        static_cast<int>(std::lround(static_cast<double>(st.v[static_cast<size_t>(i)])));
  }
  cfg.stc_blocks.clear();
  for (float b : meta_tensor(by_name, "meta/stc_blocks").v)
    cfg.stc_blocks.push_back(static_cast<int>(std::lround(static_cast<double>(b))));
  const Tensor<float>& sc = meta_tensor(by_name, "meta/stc");
  if (sc.numel() != 5) throw FormatError("checkpoint: meta/stc must have length 5");
  cfg.stc.k = static_cast<int>(std::lround(static_cast<double>(sc.v[0])));
  cfg.stc.temperature = static_cast<double>(sc.v[1]);
  cfg.stc.c_mid = static_cast<int>(std::lround(static_cast<double>(sc.v[2])));
  cfg.stc.exclude_same_node = sc.v[3] != 0.0f;
  cfg.stc.straight_line = sc.v[4] != 0.0f;
  const Tensor<float>& gr = meta_tensor(by_name, "meta/graph");
  if (gr.numel() < 2) throw FormatError("checkpoint: meta/graph too short");
  int num_nodes = static_cast<int>(std::lround(static_cast<double>(gr.v[0])));
  int root = static_cast<int>(std::lround(static_cast<double>(gr.v[1])));
  if (gr.numel() != 1 + num_nodes)
    throw FormatError("checkpoint: meta/graph length does not match node count");
  cfg.skeleton.num_nodes = num_nodes;
  cfg.skeleton.root = root;
  cfg.skeleton.edges.clear();
  size_t at = 2;
  for (int v = 0; v < num_nodes; ++v) {
    if (v == root) continue;
    int p = static_cast<int>(std::lround(static_cast<double>(gr.v[at++])));
    cfg.skeleton.edges.push_back({p, v});
  }

  int epoch = meta_int(by_name, "meta/epoch");
  if (epoch_out) *epoch_out = epoch;

  model::StcNet<float> net(cfg, 0);
  auto& ps = net.params();
  size_t expected = ps.size() + 11;  // parameters plus the meta records
  if (by_name.size() != expected)
    throw FormatError("checkpoint: tensor count does not match the model (" +
                      std::to_string(by_name.size()) + " vs " + std::to_string(expected) + ")");
  for (size_t i = 0; i < ps.size(); ++i) {
    auto& p = ps.at(i);
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing tensor " + p.name);
    if (it->second.shape != p.value.shape)
      throw FormatError("checkpoint: shape mismatch for " + p.name + " (" +
                        it->second.shape_str() + " vs " + p.value.shape_str() + ")");
    p.value = it->second;
  }
  return net;
}

}  // namespace stcnet::ckpt
