#include "depthfuse/network.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "depthfuse/error.hpp"

namespace depthfuse {

using nlohmann::json;

// ---- config ----

void NetConfig::validate() const {
  if (base_channels == 0 || encoder_levels == 0 || latent_channels == 0 || guidance_channels == 0 ||
      critic_channels == 0 || critic_layers == 0) {
    throw ValidationError("net config: channel and level counts must be >= 1");
  }
  if (encoder_levels > 5) throw ValidationError("net config: at most 5 encoder levels");
  const std::size_t f = std::size_t{1} << std::max(encoder_levels, critic_layers);
  if (height == 0 || width == 0 || height % f != 0 || width % f != 0) {
    throw ValidationError("net config: input " + std::to_string(width) + "x" + std::to_string(height) +
                          " is not divisible by " + std::to_string(f));
  }
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw ValidationError("net config: leaky_slope must be in [0, 1)");
  if (!(eps > 0.0)) throw ValidationError("net config: eps must be positive");
  if (!(depth_scale > 0.0)) throw ValidationError("net config: depth_scale must be positive");
}

std::string NetConfig::to_json() const {
  json j = {{"base_channels", base_channels},
            {"encoder_levels", encoder_levels},
            {"latent_channels", latent_channels},
            {"guidance_channels", guidance_channels},
            {"critic_channels", critic_channels},
            {"critic_layers", critic_layers},
            {"height", height},
            {"width", width},
            {"leaky_slope", leaky_slope},
            {"eps", eps},
            {"depth_scale", depth_scale},
            {"seed", seed}};
  return j.dump();
}

NetConfig NetConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("net config is not valid JSON: ") + e.what());
  }
  NetConfig c;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "base_channels") c.base_channels = v.get<std::size_t>();
      else if (k == "encoder_levels") c.encoder_levels = v.get<std::size_t>();
      else if (k == "latent_channels") c.latent_channels = v.get<std::size_t>();
      else if (k == "guidance_channels") c.guidance_channels = v.get<std::size_t>();
      else if (k == "critic_channels") c.critic_channels = v.get<std::size_t>();
      else if (k == "critic_layers") c.critic_layers = v.get<std::size_t>();
      else if (k == "height") c.height = v.get<std::size_t>();
      else if (k == "width") c.width = v.get<std::size_t>();
      else if (k == "leaky_slope") c.leaky_slope = v.get<double>();
      else if (k == "eps") c.eps = v.get<double>();
      else if (k == "depth_scale") c.depth_scale = v.get<double>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else throw ValidationError("net config: unknown key '" + k + "'");
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("net config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- construction ----

Conv Conv::create(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding,
                  double slope, Rng& rng) {
  const double fan_in = static_cast<double>(in * kernel * kernel);
  const double bound = std::sqrt(6.0 / ((1.0 + slope * slope) * fan_in));
  std::vector<double> w(out * in * kernel * kernel);
  for (double& x : w) x = rng.uniform(-bound, bound);
  return {Tensor::from({out, in, kernel, kernel}, std::move(w), true), Tensor::zeros({out}, true), stride, padding};
}

namespace {

std::vector<std::size_t> level_channels(std::size_t base, std::size_t levels, std::size_t deepest) {
  std::vector<std::size_t> c(levels + 1);
  for (std::size_t i = 0; i <= levels; ++i) c[i] = base << i;
  if (deepest > 0) c[levels] = deepest;
  return c;
}

Encoder make_encoder(std::size_t in, const std::vector<std::size_t>& ch, double slope, Rng& rng) {
  Encoder e;
  e.stem = Conv::create(in, ch[0], 3, 1, 1, slope, rng);
  for (std::size_t i = 1; i < ch.size(); ++i) e.down.push_back(Conv::create(ch[i - 1], ch[i], 3, 2, 1, slope, rng));
  return e;
}

Decoder make_decoder(const std::vector<std::size_t>& ch, double slope, Rng& rng) {
  Decoder d;
  for (std::size_t i = 0; i + 1 < ch.size(); ++i) d.stages.push_back(Conv::create(ch[i + 1], ch[i], 3, 1, 1, slope, rng));
  d.head = Conv::create(ch[0], 2, 3, 1, 1, 1.0, rng);
  return d;
}

// Visitors hand out references into the bundle; the const entry points
// below only read through them.
template <typename Fn>
void visit_conv(const std::string& name, Conv& c, Fn&& fn) {
  fn(name + ".weight", c.weight);
  fn(name + ".bias", c.bias);
}

template <typename Fn>
void visit_unet(const std::string& prefix, Encoder& e, Decoder& d, Fn&& fn) {
  visit_conv(prefix + ".stem", e.stem, fn);
  for (std::size_t i = 0; i < e.down.size(); ++i) visit_conv(prefix + ".down" + std::to_string(i + 1), e.down[i], fn);
  for (std::size_t i = 0; i < d.stages.size(); ++i) visit_conv(prefix + ".up" + std::to_string(i), d.stages[i], fn);
  visit_conv(prefix + ".head", d.head, fn);
}

template <typename Fn>
void visit_generator_side(NetworkBundle& b, Fn&& fn) {
  visit_unet("guidance", b.guidance.encoder, b.guidance.decoder, fn);
  visit_unet("constraint", b.constraint.encoder, b.constraint.decoder, fn);
  visit_unet("generator", b.generator.encoder, b.generator.decoder, fn);
  static const char* const kNames[] = {"scale_w", "scale_b", "bias_w", "bias_b",
                                       "attn_z_w", "attn_z_b", "attn_f_w", "attn_f_b"};
  for (std::size_t s = 0; s < b.generator.modulation.size(); ++s) {
    const auto ts = b.generator.modulation[s].tensors();
    for (std::size_t k = 0; k < ts.size(); ++k) {
      fn("generator.wadain" + std::to_string(s) + "." + kNames[k], *ts[k]);
    }
  }
}

template <typename Fn>
void visit_critic(NetworkBundle& b, Fn&& fn) {
  for (std::size_t i = 0; i < b.critic.layers.size(); ++i) {
    visit_conv("critic.conv" + std::to_string(i), b.critic.layers[i], fn);
  }
}

}  // namespace

NetworkBundle NetworkBundle::create(const NetConfig& config, const LossWeights& weights) {
  config.validate();
  weights.validate();
  NetworkBundle b;
  b.config = config;
  b.weights = weights;
  const double slope = config.leaky_slope;
  const std::size_t levels = config.encoder_levels;

  // Separate streams per sub-network keep each one's init independent of
  // the others' sizes.
  Rng rg(derive_seed(config.seed, 1));
  const auto gch = level_channels(config.guidance_channels, levels, 0);
  b.guidance.encoder = make_encoder(3, gch, slope, rg);
  b.guidance.decoder = make_decoder(gch, slope, rg);

  Rng rm(derive_seed(config.seed, 2));
  const auto ch = level_channels(config.base_channels, levels, config.latent_channels);
  b.constraint.encoder = make_encoder(3, ch, slope, rm);
  b.constraint.decoder = make_decoder(ch, slope, rm);

  Rng rgen(derive_seed(config.seed, 3));
  b.generator.encoder = make_encoder(3, ch, slope, rgen);
  b.generator.decoder = make_decoder(ch, slope, rgen);
  for (std::size_t i = levels; i >= 1; --i) {
    b.generator.modulation.push_back(WAdaInParams::create(config.latent_channels, ch[i], rgen));
    b.generator.modulation.back().eps = config.eps;
  }

  Rng rd(derive_seed(config.seed, 4));
  std::size_t in = 4, width = config.critic_channels;
  for (std::size_t i = 0; i < config.critic_layers; ++i) {
    const bool last = i + 1 == config.critic_layers;
    const std::size_t out = last ? 1 : width;
    b.critic.layers.push_back(Conv::create(in, out, 4, 2, 1, last ? 1.0 : slope, rd));
    in = out;
    width *= 2;
  }
  return b;
}

std::vector<NamedTensor> NetworkBundle::generator_side_parameters() const {
  std::vector<NamedTensor> out;
  visit_generator_side(const_cast<NetworkBundle&>(*this), [&](const std::string& n, const Tensor& t) { out.push_back({n, t}); });
  return out;
}

std::vector<NamedTensor> NetworkBundle::critic_parameters() const {
  std::vector<NamedTensor> out;
  visit_critic(const_cast<NetworkBundle&>(*this), [&](const std::string& n, const Tensor& t) { out.push_back({n, t}); });
  return out;
}

std::vector<NamedTensor> NetworkBundle::parameters() const {
  auto out = generator_side_parameters();
  auto c = critic_parameters();
  out.insert(out.end(), c.begin(), c.end());
  return out;
}

Tensor& NetworkBundle::parameter(const std::string& name) {
  Tensor* found = nullptr;
  auto match = [&](const std::string& n, Tensor& t) {
    if (n == name) found = &t;
  };
  visit_generator_side(*this, match);
  visit_critic(*this, match);
  if (!found) throw ValidationError("no parameter named '" + name + "'");
  return *found;
}

std::size_t NetworkBundle::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

// ---- forward passes ----

namespace {

void require_input(const NetworkBundle& net, const Tensor& t, std::size_t channels, const char* what) {
  const NetConfig& c = net.config;
  if (t.rank() != 4 || t.dim(1) != channels || t.dim(2) != c.height || t.dim(3) != c.width) {
    throw DimensionError(std::string(what) + ": expected N x " + std::to_string(channels) + " x " +
                         std::to_string(c.height) + " x " + std::to_string(c.width) + ", got " +
                         shape_str(t.shape()));
  }
}

std::vector<Tensor> encode(const Encoder& e, const Tensor& x, double slope) {
  std::vector<Tensor> feats;
  feats.push_back(leaky_relu(e.stem(x), slope));
  for (const Conv& c : e.down) feats.push_back(leaky_relu(c(feats.back()), slope));
  return feats;
}

// One decoder stage: conv at the coarse level, 2x upsample, skip, activation.
Tensor up_stage(const Conv& c, const Tensor& h, const Tensor& skip, double slope) {
  return leaky_relu(add(upsample_nearest2x(c(h)), skip), slope);
}

Tensor decode(const Decoder& d, const std::vector<Tensor>& feats, double slope) {
  Tensor h = feats.back();
  for (std::size_t i = d.stages.size(); i-- > 0;) h = up_stage(d.stages[i], h, feats[i], slope);
  return d.head(h);
}

Tensor centered(const Tensor& rgb) { return add_scalar(rgb, -0.5); }

Tensor depth_head(const Tensor& two, double depth_scale) { return scale(softplus(slice_channels(two, 0, 1)), depth_scale); }

}  // namespace

GuidanceMap guidance_forward(const NetworkBundle& net, const Tensor& rgb) {
  require_input(net, rgb, 3, "guidance_forward");
  const double slope = net.config.leaky_slope;
  const Tensor out = decode(net.guidance.decoder, encode(net.guidance.encoder, centered(rgb), slope), slope);
  return {concat_channels({sigmoid(slice_channels(out, 0, 1)), slice_channels(out, 1, 1)})};
}

namespace {

std::vector<Tensor> constraint_features(const NetworkBundle& net, const Tensor& d_in, const GuidanceMap& g) {
  require_input(net, d_in, 1, "constraint_forward depth");
  require_input(net, g.map, 2, "constraint_forward guidance");
  if (g.map.dim(0) != d_in.dim(0)) throw DimensionError("constraint_forward: batch size mismatch");
  const Tensor x = concat_channels({scale(d_in, 1.0 / net.config.depth_scale), g.map});
  return encode(net.constraint.encoder, x, net.config.leaky_slope);
}

}  // namespace

ConstraintOutputs constraint_forward(const NetworkBundle& net, const Tensor& d_in, const GuidanceMap& g) {
  const double slope = net.config.leaky_slope;
  std::vector<Tensor> feats = constraint_features(net, d_in, g);
  const Tensor out = decode(net.constraint.decoder, feats, slope);
  ConstraintOutputs r;
  r.d_l = depth_head(out, net.config.depth_scale);
  r.c_l = slice_channels(out, 1, 1);
  r.z = feats.back();
  feats.pop_back();
  r.skips = std::move(feats);
  return r;
}

GeneratorOutputs generator_forward(const NetworkBundle& net, const Tensor& z, const Tensor& rgb) {
  require_input(net, rgb, 3, "generator_forward rgb");
  const NetConfig& c = net.config;
  const std::size_t f = std::size_t{1} << c.encoder_levels;
  if (z.rank() != 4 || z.dim(0) != rgb.dim(0) || z.dim(1) != c.latent_channels || z.dim(2) != c.height / f ||
      z.dim(3) != c.width / f) {
    throw DimensionError("generator_forward: latent " + shape_str(z.shape()) + " does not match the config");
  }
  const double slope = c.leaky_slope;
  const GeneratorNet& g = net.generator;
  const std::vector<Tensor> feats = encode(g.encoder, centered(rgb), slope);
  Tensor h = feats.back();
  for (std::size_t i = g.decoder.stages.size(); i-- > 0;) {
    const WAdaInParams& m = g.modulation[g.decoder.stages.size() - 1 - i];
    h = up_stage(g.decoder.stages[i], w_adain(z, h, m), feats[i], slope);
  }
  const Tensor out = g.decoder.head(h);
  return {depth_head(out, c.depth_scale), slice_channels(out, 1, 1)};
}

Tensor discriminator_forward(const NetworkBundle& net, const Tensor& depth, const Tensor& rgb) {
  require_input(net, depth, 1, "discriminator_forward depth");
  require_input(net, rgb, 3, "discriminator_forward rgb");
  if (depth.dim(0) != rgb.dim(0)) throw DimensionError("discriminator_forward: batch size mismatch");
  Tensor h = concat_channels({scale(depth, 1.0 / net.config.depth_scale), centered(rgb)});
  const auto& layers = net.critic.layers;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = leaky_relu(h, net.config.leaky_slope);
  }
  return h;
}

Tensor constraint_latent(const NetworkBundle& net, const Tensor& d_in, const GuidanceMap& g) {
  return constraint_features(net, d_in, g).back();
}

GeneratorOutputs fused_forward(const NetworkBundle& net, const Tensor& d_pseudo, const Tensor& rgb) {
  return generator_forward(net, constraint_latent(net, d_pseudo, guidance_forward(net, rgb)), rgb);
}

ForwardOutputs full_forward(const NetworkBundle& net, const Tensor& d_pseudo, const Tensor& rgb) {
  ForwardOutputs o;
  o.guidance = guidance_forward(net, rgb);
  ConstraintOutputs m = constraint_forward(net, d_pseudo, o.guidance);
  GeneratorOutputs g = generator_forward(net, m.z, rgb);
  o.z = m.z;
  o.d_l = m.d_l;
  o.c_l = m.c_l;
  o.d_f = g.d_f;
  o.c_f = g.c_f;
  o.d_pred = confidence_fuse(o.d_l, o.c_l, o.d_f, o.c_f);
  return o;
}

// ---- conversions ----

Tensor depth_tensor(std::span<const DepthMap> maps) {
  if (maps.empty()) throw DimensionError("depth_tensor: empty batch");
  const std::size_t w = maps[0].width(), h = maps[0].height();
  std::vector<double> v;
  v.reserve(maps.size() * w * h);
  for (const auto& m : maps) {
    if (m.width() != w || m.height() != h) throw DimensionError("depth_tensor: maps differ in size");
    v.insert(v.end(), m.values().begin(), m.values().end());
  }
  return Tensor::from({maps.size(), 1, h, w}, std::move(v));
}

Tensor rgb_tensor(std::span<const RgbImage> images) {
  if (images.empty()) throw DimensionError("rgb_tensor: empty batch");
  const std::size_t w = images[0].width, h = images[0].height, hw = w * h;
  std::vector<double> v(images.size() * 3 * hw);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& img = images[n];
    if (img.width != w || img.height != h) throw DimensionError("rgb_tensor: images differ in size");
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < hw; ++i) v[(n * 3 + c) * hw + i] = img.data[3 * i + c] / 255.0;
    }
  }
  return Tensor::from({images.size(), 3, h, w}, std::move(v));
}

DepthMap to_depth_map(const Tensor& t, std::size_t n, DepthRole role) {
  if (t.rank() != 4 || t.dim(1) != 1 || n >= t.dim(0)) {
    throw DimensionError("to_depth_map: expected N x 1 x H x W with sample " + std::to_string(n) + ", got " +
                         shape_str(t.shape()));
  }
  const std::size_t h = t.dim(2), w = t.dim(3);
  DepthMap out(w, h, role);
  const auto v = t.data();
  for (std::size_t i = 0; i < w * h; ++i) {
    const double d = v[n * w * h + i];
    if (d > 0.0) out.set(i, std::min(d, kMaxDepthMeters));
  }
  return out;
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[8] = {'D', 'F', 'C', 'K', 'P', 'T', '\r', '\n'};

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError("checkpoint: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_doubles(std::ostream& os, std::span<const double> values) {
  for (double d : values) put_u64(os, std::bit_cast<std::uint64_t>(d));
}

json tensor_table(const std::vector<NamedTensor>& ts) {
  json a = json::array();
  for (const auto& t : ts) a.push_back({{"name", t.name}, {"shape", t.tensor.shape()}});
  return a;
}

std::vector<double> read_doubles(std::istream& is, std::size_t n, const std::string& name) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError("checkpoint: data for '" + name + "' is truncated");
    std::uint64_t u = 0;
    for (int k = 0; k < 8; ++k) u |= static_cast<std::uint64_t>(b[k]) << (8 * k);
    v[i] = std::bit_cast<double>(u);
    if (!std::isfinite(v[i])) throw FormatError("checkpoint: non-finite value in '" + name + "'");
  }
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto params = ck.bundle.parameters();
  json header;
  header["format_version"] = kCheckpointVersion;
  header["config"] = json::parse(ck.bundle.config.to_json());
  header["loss_weights"] = {{"lambda_g", ck.bundle.weights.lambda_g},
                            {"lambda_l", ck.bundle.weights.lambda_l},
                            {"lambda_pred", ck.bundle.weights.lambda_pred}};
  header["step"] = ck.step;
  header["parameters"] = tensor_table(params);
  header["extra_tensors"] = tensor_table(ck.extra);
  try {
    header["extra"] = json::parse(ck.extra_json);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: extra_json is not valid JSON: ") + e.what());
  }
  const std::string text = header.dump();

  // Write to a sibling file and rename so a crash never leaves a torn file.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + tmp.string());
    os.write(kMagic, sizeof kMagic);
    put_u64(os, kCheckpointVersion);
    put_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : params) put_doubles(os, p.tensor.data());
    for (const auto& p : ck.extra) put_doubles(os, p.tensor.data());
    if (!os.flush()) throw IoError("failed writing checkpoint: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[sizeof kMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw FormatError("not a checkpoint file: " + path.string());
  }
  const std::uint64_t version = get_u64(is);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported");
  }
  const std::uint64_t len = get_u64(is);
  if (len > (std::uint64_t{1} << 30)) throw FormatError("checkpoint header is implausibly large");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw FormatError("checkpoint: truncated header");

  Checkpoint ck;
  try {
    const json header = json::parse(text);
    const NetConfig config = NetConfig::from_json(header.at("config").dump());
    LossWeights w;
    const auto& lw = header.at("loss_weights");
    w.lambda_g = lw.at("lambda_g").get<double>();
    w.lambda_l = lw.at("lambda_l").get<double>();
    w.lambda_pred = lw.at("lambda_pred").get<double>();
    ck.bundle = NetworkBundle::create(config, w);
    ck.step = header.at("step").get<std::uint64_t>();
    ck.extra_json = header.at("extra").dump();

    std::map<std::string, Tensor> by_name;
    for (const auto& p : ck.bundle.parameters()) by_name.emplace(p.name, p.tensor);
    const auto& table = header.at("parameters");
    if (table.size() != by_name.size()) {
      throw FormatError("checkpoint holds " + std::to_string(table.size()) + " parameters, the config needs " +
                        std::to_string(by_name.size()));
    }
    for (const auto& entry : table) {
      const std::string name = entry.at("name").get<std::string>();
      const Shape shape = entry.at("shape").get<Shape>();
      auto it = by_name.find(name);
      if (it == by_name.end()) throw FormatError("checkpoint: unexpected parameter '" + name + "'");
      if (it->second.shape() != shape) {
        throw FormatError("checkpoint: parameter '" + name + "' has shape " + shape_str(shape) + ", expected " +
                          shape_str(it->second.shape()));
      }
      const auto values = read_doubles(is, shape_numel(shape), name);
      Tensor t = it->second;
      std::copy(values.begin(), values.end(), t.mutable_data().begin());
    }
    for (const auto& entry : header.at("extra_tensors")) {
      const std::string name = entry.at("name").get<std::string>();
      const Shape shape = entry.at("shape").get<Shape>();
      ck.extra.push_back({name, Tensor::from(shape, read_doubles(is, shape_numel(shape), name))});
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is malformed: ") + e.what());
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint has trailing bytes");
  return ck;
}

}  // namespace depthfuse
