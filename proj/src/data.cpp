#include "stcnet/data.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "stcnet/binio.hpp"
#include "stcnet/crc32.hpp"
#include "stcnet/rng.hpp"

namespace stcnet::data {

namespace {

constexpr char kMagic[4] = {'S', 'T', 'C', 'D'};
constexpr uint32_t kVersion = 1;
constexpr int kChannels = 3;

struct BodyLayout {
  int limb_len = 0;
  int spine_len = 0;
  // First node of limb chain l (0,1 arms; 2,3 legs); chains run consecutively.
  int limb_start(int l) const { return spine_len + l * limb_len; }
};

BodyLayout layout_of(int num_nodes) {
  if (num_nodes < 5)
    throw ArgumentError("synth: need at least 5 joints to form 5 chains");
  BodyLayout b;
  b.limb_len = num_nodes / 5;
  b.spine_len = num_nodes - 4 * b.limb_len;
  return b;
}

// Closed-form pose: base skeleton plus one sinusoidally driven limb per class.
struct Pose {
  BodyLayout body;
  int frames = 0;
  int cls = 0;

  int chain() const { return cls % 4; }
  double freq() const { return 1.5 + 0.5 * (cls % 4) + 1.0 * (cls / 4); }
  double phase() const { return 0.9 * cls; }

  double value(int c, int t, int v) const {
    double x = 0;
    int s = body.spine_len, L = body.limb_len;
    if (v < s) {
      if (c == 1) x = 0.3 * v;
    } else {
      int l = (v - s) / L;
      int j = (v - s) % L + 1;  // 1-based position along the chain
      if (l < 2) {              // arms, attached at the spine top
        if (c == 0) x = (l == 0 ? -0.25 : 0.25) * j;
        if (c == 1) x = 0.3 * (s - 1);
      } else {                  // legs, attached at the root
        if (c == 0) x = (l == 2 ? -0.15 : 0.15) * j;
        if (c == 1) x = -0.35 * j;
      }
      if (l == chain()) {
        int axis = l < 2 ? 2 : 0;
        if (c == axis) {
          double amp = 0.2 + 0.25 * j;
          x += amp * std::sin(2.0 * std::numbers::pi * freq() * t / frames + phase());
        }
      }
    }
    return x;
  }
};

}  // namespace

void SynthSpec::validate() const {
  if (num_nodes < 5) throw ArgumentError("synth: num_nodes must be >= 5");
  if (frames < 8) throw ArgumentError("synth: frames must be >= 8");
  if (num_classes < 2) throw ArgumentError("synth: num_classes must be >= 2");
  if (per_class < 1) throw ArgumentError("synth: per_class must be >= 1");
  if (!(noise_std >= 0)) throw ArgumentError("synth: noise_std must be >= 0");
}

Tensor<float> Dataset::sample(int64_t n) const {
  if (n < 0 || n >= size()) throw ArgumentError("dataset: sample index out of range");
  int64_t c = samples.dim(1), t = samples.dim(2), v = samples.dim(3);
  Tensor<float> out({c, t, v});
  const float* src = samples.data() + n * c * t * v;
  std::copy(src, src + c * t * v, out.data());
  return out;
}

void Dataset::validate() const {
  graph.validate();
  if (samples.rank() != 4) throw ArgumentError("dataset: samples must be (N,C,T,V)");
  if (samples.dim(3) != graph.num_nodes)
    throw ArgumentError("dataset: node axis does not match the graph");
  if (static_cast<int64_t>(labels.size()) != samples.dim(0))
    throw ArgumentError("dataset: label count does not match the sample count");
  for (int l : labels)
    if (l < 0) throw ArgumentError("dataset: negative label");
  if (!samples.all_finite()) throw ArgumentError("dataset: non-finite sample values");
}

graph::SkeletonGraph body_graph(int num_nodes) {
  BodyLayout b = layout_of(num_nodes);
  graph::SkeletonGraph g;
  g.num_nodes = num_nodes;
  g.root = 0;
  for (int i = 1; i < b.spine_len; ++i) g.edges.push_back({i - 1, i});
  for (int l = 0; l < 4; ++l) {
    int attach = l < 2 ? b.spine_len - 1 : 0;
    int first = b.limb_start(l);
    g.edges.push_back({attach, first});
    for (int j = 1; j < b.limb_len; ++j) g.edges.push_back({first + j - 1, first + j});
  }
  return g;
}

std::vector<int> animated_joints(int num_nodes, int cls) {
  BodyLayout b = layout_of(num_nodes);
  if (cls < 0) throw ArgumentError("synth: class must be >= 0");
  std::vector<int> out;
  int first = b.limb_start(cls % 4);
  for (int j = 0; j < b.limb_len; ++j) out.push_back(first + j);
  return out;
}

Dataset generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.graph = body_graph(spec.num_nodes);
  int64_t n = static_cast<int64_t>(spec.num_classes) * spec.per_class;
  ds.samples = Tensor<float>({n, kChannels, spec.frames, spec.num_nodes});
  ds.labels.resize(static_cast<size_t>(n));

  Pose pose;
  pose.body = layout_of(spec.num_nodes);
  pose.frames = spec.frames;
  for (int cls = 0; cls < spec.num_classes; ++cls) {
    pose.cls = cls;
    for (int i = 0; i < spec.per_class; ++i) {
      int64_t idx = static_cast<int64_t>(cls) * spec.per_class + i;
      ds.labels[static_cast<size_t>(idx)] = cls;
      RngStream rng(spec.seed, "synth.sample", static_cast<uint64_t>(idx));
      float* dst = ds.samples.data() + idx * kChannels * spec.frames * spec.num_nodes;
      for (int c = 0; c < kChannels; ++c)
        for (int t = 0; t < spec.frames; ++t)
          for (int v = 0; v < spec.num_nodes; ++v) {
            double x = pose.value(c, t, v);
            if (spec.noise_std > 0) x += rng.next_gauss() * spec.noise_std;
            *dst++ = static_cast<float>(x);
          }
    }
  }
  return ds;
}

std::pair<Dataset, Dataset> split_per_class(const Dataset& ds, int train_per_class) {
  ds.validate();
  if (train_per_class < 1) throw ArgumentError("split: train_per_class must be >= 1");
  int num_classes = 0;
  for (int l : ds.labels) num_classes = std::max(num_classes, l + 1);
  std::vector<int> seen(static_cast<size_t>(num_classes), 0);
  std::vector<int64_t> train_idx, val_idx;
  for (int64_t i = 0; i < ds.size(); ++i) {
    int l = ds.labels[static_cast<size_t>(i)];
    (seen[static_cast<size_t>(l)]++ < train_per_class ? train_idx : val_idx).push_back(i);
  }
  for (int c = 0; c < num_classes; ++c)
    if (seen[static_cast<size_t>(c)] <= train_per_class)
      throw ArgumentError("split: class " + std::to_string(c) +
                          " has no samples left for validation");

  auto take = [&](const std::vector<int64_t>& idx) {
    Dataset out;
    out.graph = ds.graph;
    int64_t c = ds.samples.dim(1), t = ds.samples.dim(2), v = ds.samples.dim(3);
    out.samples = Tensor<float>({static_cast<int64_t>(idx.size()), c, t, v});
    int64_t stride = c * t * v;
    for (size_t j = 0; j < idx.size(); ++j) {
      const float* src = ds.samples.data() + idx[j] * stride;
      std::copy(src, src + stride, out.samples.data() + static_cast<int64_t>(j) * stride);
      out.labels.push_back(ds.labels[static_cast<size_t>(idx[j])]);
    }
    return out;
  };
  return {take(train_idx), take(val_idx)};
}

void write_dataset(const Dataset& ds, const std::string& path) {
  ds.validate();
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<uint32_t>(ds.size()));
  put_u32(buf, static_cast<uint32_t>(ds.samples.dim(1)));
  put_u32(buf, static_cast<uint32_t>(ds.samples.dim(2)));
  put_u32(buf, static_cast<uint32_t>(ds.samples.dim(3)));
  put_u32(buf, static_cast<uint32_t>(ds.graph.num_nodes));
  put_u32(buf, static_cast<uint32_t>(ds.graph.root));
  std::vector<int> par = ds.graph.parents();
  for (int v = 0; v < ds.graph.num_nodes; ++v)
    if (v != ds.graph.root) put_u32(buf, static_cast<uint32_t>(par[static_cast<size_t>(v)]));
  for (float x : ds.samples.v) put_f32(buf, x);
  for (int l : ds.labels) put_u32(buf, static_cast<uint32_t>(l));
  put_u32(buf, crc32(buf.data(), buf.size()));
  write_file_bytes(path, buf);
}

Dataset read_dataset(const std::string& path) {
  std::string buf = read_file_bytes(path);
  ByteReader r{buf, 0, "dataset"};
  if (r.bytes(4, "magic") != std::string(kMagic, 4)) throw FormatError("dataset: bad magic");
  uint32_t version = r.u32("version");
  if (version != kVersion)
    throw FormatError("dataset: unsupported version " + std::to_string(version));
  uint32_t n = r.u32("sample count");
  uint32_t c = r.u32("channel count");
  uint32_t t = r.u32("frame count");
  uint32_t v = r.u32("node count");
  uint32_t gv = r.u32("graph node count");
  if (gv != v) throw FormatError("dataset: graph node count does not match the node axis");
  if (c == 0) throw FormatError("dataset: channel count must be positive");
  if (t == 0) throw FormatError("dataset: frame count must be positive");
  if (v == 0) throw FormatError("dataset: node count must be positive");
  uint32_t root = r.u32("graph root");
  if (root >= v) throw FormatError("dataset: graph root out of range");

  Dataset ds;
  ds.graph.num_nodes = static_cast<int>(v);
  ds.graph.root = static_cast<int>(root);
  for (uint32_t i = 0; i < v; ++i) {
    if (i == root) continue;
    uint32_t p = r.u32("graph parents");
    ds.graph.edges.push_back({static_cast<int>(p), static_cast<int>(i)});
  }
  auto checked_mul = [](uint64_t a, uint64_t b) {
    if (b != 0 && a > std::numeric_limits<uint64_t>::max() / b)
      throw FormatError("dataset: size header overflow");
    return a * b;
  };
  uint64_t numel = checked_mul(checked_mul(n, c), checked_mul(t, v));
  r.need(static_cast<size_t>(checked_mul(numel, 4)), "payload");
  ds.samples = Tensor<float>({static_cast<int64_t>(n), static_cast<int64_t>(c),
                              static_cast<int64_t>(t), static_cast<int64_t>(v)});
  for (uint64_t i = 0; i < numel; ++i) ds.samples.v[static_cast<size_t>(i)] = r.f32("payload");
  r.need(static_cast<size_t>(n) * 4, "labels");
  ds.labels.resize(n);
  for (uint32_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(r.u32("labels"));

  size_t body = r.pos;
  uint32_t stored = r.u32("crc32");
  if (r.pos != buf.size()) throw FormatError("dataset: trailing bytes after crc32");
  if (stored != crc32(buf.data(), body)) throw FormatError("dataset: crc32 mismatch");
  try {
    ds.validate();
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("dataset: ") + e.what());
  }
  return ds;
}

Dataset preprocess(const Dataset& ds, int target_frames) {
  ds.validate();
  if (target_frames < 1) throw ArgumentError("preprocess: target_frames must be >= 1");
  int64_t n = ds.size(), c = ds.samples.dim(1), t = ds.samples.dim(2), v = ds.samples.dim(3);
  Dataset out;
  out.graph = ds.graph;
  out.labels = ds.labels;
  out.samples = Tensor<float>({n, c, target_frames, v});
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t ci = 0; ci < c; ++ci) {
      float center = ds.samples.at(ni, ci, 0, ds.graph.root);
      for (int64_t ti = 0; ti < target_frames; ++ti) {
        int64_t src_t = ti * t / target_frames;
        for (int64_t vi = 0; vi < v; ++vi)
          out.samples.at(ni, ci, ti, vi) = ds.samples.at(ni, ci, src_t, vi) - center;
      }
    }
  return out;
}

}  // namespace stcnet::data
