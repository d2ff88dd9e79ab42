#include "adavit/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace adavit {

namespace {

constexpr std::uint32_t kVersion = 1;

template <class T>
T to_le(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
}

class Writer {
public:
  explicit Writer(std::ostream& os) : os_(os) {}

  template <class T>
  void put(T v) {
    const T le = to_le(v);
    os_.write(reinterpret_cast<const char*>(&le), sizeof(T));
  }
  void tag(const char (&t)[5]) { os_.write(t, 4); }
  void bytes(const std::string& s) { os_.write(s.data(), static_cast<std::streamsize>(s.size())); }
  void mat(const Mat& m) {
    put<std::uint64_t>(m.rows);
    put<std::uint64_t>(m.cols);
    for (double v : m.data) put(v);
  }

private:
  std::ostream& os_;
};

class Reader {
public:
  Reader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  template <class T>
  T get() {
    T v;
    raw(&v, sizeof(T));
    return to_le(v);
  }
  std::string bytes(std::size_t n) {
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  Mat mat() {
    const auto rows = get<std::uint64_t>();
    const auto cols = get<std::uint64_t>();
    if (rows > (1u << 24) || cols > (1u << 24)) fail("implausible tensor shape");
    Mat m(rows, cols);
    for (double& v : m.data) v = get<double>();
    return m;
  }
  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }
  [[noreturn]] void fail(const std::string& msg) { throw FormatError(what_ + ": " + msg); }

private:
  void raw(void* dst, std::size_t n) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) fail("truncated file");
  }

  std::istream& is_;
  std::string what_;
};

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return is;
}

void write_config(Writer& w, const ElasticConfig& c) {
  for (std::size_t v : {c.depth, c.heads, c.group_size, c.image_side, c.patch_side, c.channels,
                        c.num_classes})
    w.put<std::uint64_t>(v);
  w.put<std::uint64_t>(c.embed_choices.size());
  for (std::size_t e : c.embed_choices) w.put<std::uint64_t>(e);
  w.put<std::uint64_t>(c.mlp_ratio_choices.size());
  for (double r : c.mlp_ratio_choices) w.put(r);
}

ElasticConfig read_config(Reader& r) {
  ElasticConfig c;
  for (std::size_t* v : {&c.depth, &c.heads, &c.group_size, &c.image_side, &c.patch_side,
                         &c.channels, &c.num_classes})
    *v = r.get<std::uint64_t>();
  const auto ne = r.get<std::uint64_t>();
  if (ne > 1024) r.fail("implausible embed choice count");
  c.embed_choices.resize(ne);
  for (auto& e : c.embed_choices) e = r.get<std::uint64_t>();
  const auto nr = r.get<std::uint64_t>();
  if (nr > 1024) r.fail("implausible MLP ratio count");
  c.mlp_ratio_choices.resize(nr);
  for (auto& x : c.mlp_ratio_choices) x = r.get<double>();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    r.fail(std::string("stored config invalid: ") + e.what());
  }
  return c;
}

std::uint32_t strategy_code(TokenStrategy s) {
  switch (s) {
    case TokenStrategy::prune: return 0;
    case TokenStrategy::merge: return 1;
    case TokenStrategy::prune_then_merge: return 2;
  }
  return 0;
}

void write_net(Writer& w, const ThreeLayerNet& n) {
  for (const DenseLayer* l : {&n.l1, &n.l2, &n.l3}) {
    w.mat(l->w);
    w.mat(l->b);
  }
}

ThreeLayerNet read_net(Reader& r) {
  ThreeLayerNet n;
  for (DenseLayer* l : {&n.l1, &n.l2, &n.l3}) {
    l->w = r.mat();
    l->b = r.mat();
  }
  return n;
}

std::string selector_payload(const SelectorNets& s) {
  std::ostringstream os(std::ios::binary);
  Writer w(os);
  w.put<std::uint32_t>(strategy_code(s.strategy));
  w.put<std::uint64_t>(s.state_dim());
  w.put<std::uint64_t>(s.actor.l1.w.rows);
  w.put<std::uint64_t>(s.action_dim());
  write_net(w, s.actor);
  w.mat(s.log_std);
  write_net(w, s.critic);
  w.mat(s.state_shift);
  w.mat(s.state_scale);
  return os.str();
}

SelectorNets read_selector(Reader& r) {
  SelectorNets s;
  const auto code = r.get<std::uint32_t>();
  if (code > 2) r.fail("unknown strategy code");
  s.strategy = code == 0 ? TokenStrategy::prune
               : code == 1 ? TokenStrategy::merge
                           : TokenStrategy::prune_then_merge;
  const auto state_dim = r.get<std::uint64_t>();
  const auto hidden = r.get<std::uint64_t>();
  const auto action_dim = r.get<std::uint64_t>();
  s.actor = read_net(r);
  s.log_std = r.mat();
  s.critic = read_net(r);
  s.state_shift = r.mat();
  s.state_scale = r.mat();
  if (s.state_shift.rows != 1 || s.state_shift.cols != state_dim ||
      s.state_scale.rows != 1 || s.state_scale.cols != state_dim)
    r.fail("selector normalization shape disagrees with its header");
  if (s.state_dim() != state_dim || s.actor.l1.w.rows != hidden ||
      s.action_dim() != action_dim || s.log_std.cols != action_dim ||
      s.critic.out_dim() != 1 || s.critic.in_dim() != state_dim)
    r.fail("selector tensor shapes disagree with its header");
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const WeightStore& ws,
                     const SelectorNets* selector) {
  std::ofstream os = open_out(path);
  Writer w(os);
  w.tag("PRNC");
  w.put(kVersion);
  write_config(w, ws.config);
  std::uint64_t count = 0;
  ws.for_each_tensor([&](const std::string&, const Mat&) { ++count; });
  w.put(count);
  ws.for_each_tensor([&](const std::string& name, const Mat& m) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.mat(m);
  });
  if (selector) {
    const std::string payload = selector_payload(*selector);
    w.tag("SLCT");
    w.put<std::uint64_t>(payload.size());
    w.bytes(payload);
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is = open_in(path);
  Reader r(is, path.string());
  if (r.bytes(4) != "PRNC") r.fail("bad magic");
  if (r.get<std::uint32_t>() != kVersion) r.fail("unsupported version");
  Checkpoint ck;
  Rng rng(0);
  ck.weights = WeightStore::init(read_config(r), rng);
  std::uint64_t expected = 0;
  ck.weights.for_each_tensor([&](const std::string&, Mat&) { ++expected; });
  if (r.get<std::uint64_t>() != expected) r.fail("tensor count mismatch");
  ck.weights.for_each_tensor([&](const std::string& name, Mat& m) {
    const auto len = r.get<std::uint32_t>();
    if (len > 256) r.fail("implausible tensor name length");
    const std::string got = r.bytes(len);
    if (got != name) r.fail("expected tensor '" + name + "', found '" + got + "'");
    Mat t = r.mat();
    if (t.rows != m.rows || t.cols != m.cols) r.fail("shape mismatch for " + name);
    m = std::move(t);
  });
  while (!r.at_end()) {
    const std::string tag = r.bytes(4);
    const auto size = r.get<std::uint64_t>();
    if (tag == "SLCT") {
      std::istringstream payload(r.bytes(size), std::ios::binary);
      Reader pr(payload, path.string() + " [SLCT]");
      ck.selector = read_selector(pr);
    } else {
      r.bytes(size);
    }
  }
  return ck;
}

Dataset Dataset::subset(std::span<const std::size_t> idx) const {
  Dataset d;
  d.channels = channels;
  d.side = side;
  for (std::size_t i : idx) {
    d.images.push_back(images.at(i));
    d.labels.push_back(labels.at(i));
    if (!hard.empty()) d.hard.push_back(hard.at(i));
  }
  return d;
}

void save_dataset(const std::filesystem::path& path, const Dataset& d) {
  const std::size_t pixels = d.channels * d.side * d.side;
  if (d.images.size() != d.labels.size() || (!d.hard.empty() && d.hard.size() != d.labels.size()))
    throw DimensionError("save_dataset: images, labels and flags differ in length");
  std::ofstream os = open_out(path);
  Writer w(os);
  w.tag("PRDS");
  w.put(kVersion);
  w.put<std::uint64_t>(d.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.channels));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.side));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.side));
  const std::uint32_t width = d.hard.empty() ? 1 : 2;
  w.put(width);
  for (const auto& img : d.images) {
    if (img.size() != pixels) throw DimensionError("save_dataset: image size");
    for (double v : img) w.put(static_cast<float>(v));
  }
  for (std::size_t i = 0; i < d.size(); ++i) {
    w.put<std::int32_t>(d.labels[i]);
    if (width == 2) w.put<std::int32_t>(d.hard[i]);
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is = open_in(path);
  Reader r(is, path.string());
  if (r.bytes(4) != "PRDS") r.fail("bad magic");
  if (r.get<std::uint32_t>() != kVersion) r.fail("unsupported version");
  const auto n = r.get<std::uint64_t>();
  Dataset d;
  d.channels = r.get<std::uint32_t>();
  const auto h = r.get<std::uint32_t>();
  const auto wd = r.get<std::uint32_t>();
  if (h != wd) r.fail("only square images are supported");
  d.side = h;
  const auto width = r.get<std::uint32_t>();
  if (width != 1 && width != 2) r.fail("label width must be 1 or 2");
  const std::size_t pixels = d.channels * d.side * d.side;
  if (n > (1u << 26) || pixels > (1u << 20)) r.fail("implausible dataset dimensions");
  d.images.assign(n, std::vector<double>(pixels));
  for (auto& img : d.images)
    for (double& v : img) v = r.get<float>();
  d.labels.resize(n);
  if (width == 2) d.hard.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = r.get<std::int32_t>();
    if (width == 2) d.hard[i] = r.get<std::int32_t>();
  }
  return d;
}

}  // namespace adavit
