#include "ddae/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ddae/error.hpp"
#include "ddae/ops.hpp"
#include "ddae/rng.hpp"

namespace ddae {

// ---------------------------------------------------------------- config ---

void DDAEConfig::validate() const {
  auto bad = [](const std::string& field, const std::string& why) {
    throw ParameterError("DDAEConfig." + field + ": " + why);
  };
  if (base_channels <= 0) bad("base_channels", "must be positive");
  if (channel_multipliers.empty()) bad("channel_multipliers", "needs at least one stage");
  for (int m : channel_multipliers)
    if (m <= 0) bad("channel_multipliers", "entries must be positive");
  if (blocks_per_resolution <= 0) bad("blocks_per_resolution", "must be positive");
  if (image_size <= 0) bad("image_size", "must be positive");
  if (in_channels <= 0) bad("in_channels", "must be positive");
  if (time_embed_dim <= 0) bad("time_embed_dim", "must be positive");
  if (norm_groups <= 0) bad("norm_groups", "must be positive");
  const int div = 1 << (stages() - 1);
  if (image_size % div != 0)
    bad("image_size", std::to_string(image_size) + " is not divisible by 2^(stages-1) = " + std::to_string(div));
  for (int r : attention_resolutions) {
    bool realized = false;
    for (int s = 0; s < stages(); ++s)
      if (image_size >> s == r) realized = true;
    if (!realized) bad("attention_resolutions", std::to_string(r) + " is not a realized feature-map size");
  }
}

DDAEConfig DDAEConfig::desk_default() { return DDAEConfig{}; }

DDAEConfig DDAEConfig::ddpm_cifar10() {
  DDAEConfig c;
  c.base_channels = 128;
  c.channel_multipliers = {1, 2, 2, 2};
  c.blocks_per_resolution = 2;
  c.attention_resolutions = {16};
  c.image_size = 32;
  c.in_channels = 3;
  c.time_embed_dim = 512;
  return c;
}

DDAEConfig DDAEConfig::edm_cifar10() {
  DDAEConfig c = ddpm_cifar10();
  c.channel_multipliers = {2, 2, 2};
  c.blocks_per_resolution = 4;
  return c;
}

// ------------------------------------------------------------------ taps ---

std::string to_string(TapPath p) {
  switch (p) {
    case TapPath::down: return "down";
    case TapPath::mid: return "mid";
    case TapPath::up: return "up";
  }
  return "?";
}

std::string TapId::key() const {
  return to_string(path) + "." + std::to_string(stage) + "." + std::to_string(block) + "@" +
         std::to_string(resolution);
}

TapId TapId::parse(const std::string& key) {
  TapId t;
  const auto d1 = key.find('.');
  const auto d2 = key.find('.', d1 == std::string::npos ? d1 : d1 + 1);
  const auto at = key.find('@');
  if (d1 == std::string::npos || d2 == std::string::npos || at == std::string::npos || at < d2)
    throw ParameterError("malformed tap key '" + key + "' (expected path.stage.block@resolution)");
  const std::string p = key.substr(0, d1);
  if (p == "down")
    t.path = TapPath::down;
  else if (p == "mid")
    t.path = TapPath::mid;
  else if (p == "up")
    t.path = TapPath::up;
  else
    throw ParameterError("unknown tap path '" + p + "' in '" + key + "'");
  try {
    t.stage = std::stoi(key.substr(d1 + 1, d2 - d1 - 1));
    t.block = std::stoi(key.substr(d2 + 1, at - d2 - 1));
    t.resolution = std::stoi(key.substr(at + 1));
  } catch (const std::exception&) {
    throw ParameterError("malformed tap key '" + key + "'");
  }
  return t;
}

// ----------------------------------------------------------------- impl ----

namespace {

struct Conv {
  int w = -1, b = -1, stride = 1, pad = 0;
};
struct Lin {
  int w = -1, b = -1;
};
struct Norm {
  int g = -1, b = -1, groups = 1;
};
struct Res {
  Norm n1;
  Conv c1;
  Lin temb;
  Norm n2;
  Conv c2;
  std::optional<Conv> skip;
};
struct Attn {
  Norm n;
  Conv q, k, v, proj;
};
struct Block {
  Res res;
  std::optional<Attn> attn;
  int tap = -1;
};

}  // namespace

struct DDAENetwork::Impl {
  Lin dense0, dense1;
  Conv conv_in;
  std::vector<std::vector<Block>> down;
  std::vector<std::optional<Conv>> downsample;
  std::vector<Block> mid;
  std::vector<std::vector<Block>> up;  // indexed by stage
  std::vector<std::optional<Conv>> upsample;
  Norm norm_out;
  Conv conv_out;
};

namespace {

class Builder {
 public:
  Builder(std::vector<NamedParam>& params, Rng& rng, int norm_groups)
      : params_(params), rng_(rng), norm_groups_(norm_groups) {}

  int add(const std::string& name, Tensor value) {
    params_.push_back({name, ag::parameter(std::move(value))});
    return static_cast<int>(params_.size()) - 1;
  }

  // Fan-average uniform variance scaling.
  Tensor scaled_uniform(Shape shape, double fan_in, double fan_out, double scale) {
    Tensor t(std::move(shape));
    const double limit = std::sqrt(3.0 * scale / ((fan_in + fan_out) / 2.0));
    for (auto& v : t.values()) v = static_cast<float>((2.0 * rng_.uniform() - 1.0) * limit);
    return t;
  }

  Conv conv(const std::string& name, int cin, int cout, int k, int stride, double scale = 1.0) {
    Conv c;
    c.w = add(name + ".w", scaled_uniform({cout, cin, k, k}, cin * k * k, cout * k * k, scale));
    c.b = add(name + ".b", Tensor({cout}));
    c.stride = stride;
    c.pad = k / 2;
    return c;
  }

  Lin lin(const std::string& name, int in, int out, double scale = 1.0) {
    Lin l;
    l.w = add(name + ".w", scaled_uniform({out, in}, in, out, scale));
    l.b = add(name + ".b", Tensor({out}));
    return l;
  }

  Norm norm(const std::string& name, int ch) {
    Norm n;
    n.g = add(name + ".gamma", Tensor({ch}, 1.0f));
    n.b = add(name + ".beta", Tensor({ch}));
    n.groups = std::gcd(norm_groups_, ch);
    return n;
  }

  Res res(const std::string& name, int cin, int cout, int temb) {
    Res r;
    r.n1 = norm(name + ".norm1", cin);
    r.c1 = conv(name + ".conv1", cin, cout, 3, 1);
    r.temb = lin(name + ".temb_proj", temb, cout);
    r.n2 = norm(name + ".norm2", cout);
    r.c2 = conv(name + ".conv2", cout, cout, 3, 1, 1e-10);
    if (cin != cout) r.skip = conv(name + ".nin_shortcut", cin, cout, 1, 1);
    return r;
  }

  Attn attn(const std::string& name, int ch) {
    Attn a;
    a.n = norm(name + ".norm", ch);
    a.q = conv(name + ".q", ch, ch, 1, 1);
    a.k = conv(name + ".k", ch, ch, 1, 1);
    a.v = conv(name + ".v", ch, ch, 1, 1);
    a.proj = conv(name + ".proj_out", ch, ch, 1, 1, 1e-10);
    return a;
  }

 private:
  std::vector<NamedParam>& params_;
  Rng& rng_;
  int norm_groups_;
};

bool has_attention(const DDAEConfig& c, int res) {
  return std::find(c.attention_resolutions.begin(), c.attention_resolutions.end(), res) !=
         c.attention_resolutions.end();
}

}  // namespace

DDAENetwork::DDAENetwork(DDAEConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  impl_ = std::make_unique<Impl>();
  Rng rng(seed);
  Builder b(params_, rng, config_.norm_groups);
  const int ch = config_.base_channels;
  const int temb = config_.time_embed_dim;
  const int S = config_.stages();

  impl_->dense0 = b.lin("temb.dense0", ch, temb);
  impl_->dense1 = b.lin("temb.dense1", temb, temb);
  impl_->conv_in = b.conv("conv_in", config_.in_channels, ch, 3, 1);

  auto add_tap = [this](TapPath p, int stage, int block, int res, int channels) {
    taps_.push_back({p, stage, block, res});
    tap_channels_.push_back(channels);
    return static_cast<int>(taps_.size()) - 1;
  };

  std::vector<int> skip_channels{ch};
  int cur = ch;
  int res = config_.image_size;
  impl_->down.resize(static_cast<std::size_t>(S));
  impl_->downsample.resize(static_cast<std::size_t>(S));
  for (int s = 0; s < S; ++s) {
    const int out = ch * config_.channel_multipliers[static_cast<std::size_t>(s)];
    for (int bi = 0; bi < config_.blocks_per_resolution; ++bi) {
      const std::string name = "down." + std::to_string(s) + ".block." + std::to_string(bi);
      Block blk;
      blk.res = b.res(name, cur, out, temb);
      if (has_attention(config_, res)) blk.attn = b.attn(name + ".attn", out);
      cur = out;
      blk.tap = add_tap(TapPath::down, s, bi, res, cur);
      impl_->down[static_cast<std::size_t>(s)].push_back(std::move(blk));
      skip_channels.push_back(cur);
    }
    if (s != S - 1) {
      impl_->downsample[static_cast<std::size_t>(s)] =
          b.conv("down." + std::to_string(s) + ".downsample", cur, cur, 3, 2);
      skip_channels.push_back(cur);
      res /= 2;
    }
  }

  {
    Block m0;
    m0.res = b.res("mid.block.0", cur, cur, temb);
    m0.attn = b.attn("mid.attn", cur);
    m0.tap = add_tap(TapPath::mid, S - 1, 0, res, cur);
    Block m1;
    m1.res = b.res("mid.block.1", cur, cur, temb);
    m1.tap = add_tap(TapPath::mid, S - 1, 1, res, cur);
    impl_->mid.push_back(std::move(m0));
    impl_->mid.push_back(std::move(m1));
  }

  impl_->up.resize(static_cast<std::size_t>(S));
  impl_->upsample.resize(static_cast<std::size_t>(S));
  for (int s = S - 1; s >= 0; --s) {
    const int out = ch * config_.channel_multipliers[static_cast<std::size_t>(s)];
    for (int bi = 0; bi <= config_.blocks_per_resolution; ++bi) {
      const int skip = skip_channels.back();
      skip_channels.pop_back();
      const std::string name = "up." + std::to_string(s) + ".block." + std::to_string(bi);
      Block blk;
      blk.res = b.res(name, cur + skip, out, temb);
      if (has_attention(config_, res)) blk.attn = b.attn(name + ".attn", out);
      cur = out;
      blk.tap = add_tap(TapPath::up, s, bi, res, cur);
      impl_->up[static_cast<std::size_t>(s)].push_back(std::move(blk));
    }
    if (s != 0) {
      impl_->upsample[static_cast<std::size_t>(s)] = b.conv("up." + std::to_string(s) + ".upsample", cur, cur, 3, 1);
      res *= 2;
    }
  }

  impl_->norm_out = b.norm("norm_out", cur);
  impl_->conv_out = b.conv("conv_out", cur, config_.in_channels, 3, 1, 1e-10);
}

DDAENetwork::DDAENetwork(DDAENetwork&& o) noexcept
    : config_(std::move(o.config_)),
      taps_(std::move(o.taps_)),
      tap_channels_(std::move(o.tap_channels_)),
      params_(std::move(o.params_)),
      impl_(std::move(o.impl_)),
      forward_calls_(o.forward_calls_.load()) {}

DDAENetwork& DDAENetwork::operator=(DDAENetwork&& o) noexcept {
  config_ = std::move(o.config_);
  taps_ = std::move(o.taps_);
  tap_channels_ = std::move(o.tap_channels_);
  params_ = std::move(o.params_);
  impl_ = std::move(o.impl_);
  forward_calls_.store(o.forward_calls_.load());
  return *this;
}

DDAENetwork::~DDAENetwork() = default;

DDAENetwork DDAENetwork::clone() const {
  DDAENetwork n;
  n.config_ = config_;
  n.taps_ = taps_;
  n.tap_channels_ = tap_channels_;
  n.impl_ = std::make_unique<Impl>(*impl_);
  for (const auto& p : params_) {
    auto v = ag::parameter(p.var->value);
    v->requires_grad = p.var->requires_grad;
    n.params_.push_back({p.name, std::move(v)});
  }
  return n;
}

int DDAENetwork::tap_position(const TapId& tap) const {
  for (std::size_t i = 0; i < taps_.size(); ++i)
    if (taps_[i] == tap) return static_cast<int>(i);
  throw ContractError("unknown tap " + tap.key());
}

int DDAENetwork::tap_channels(const TapId& tap) const {
  return tap_channels_[static_cast<std::size_t>(tap_position(tap))];
}

std::string DDAENetwork::describe_tap(const TapId& tap) const {
  const int pos = tap_position(tap);
  int k = 0, total = 0;
  for (std::size_t i = 0; i < taps_.size(); ++i)
    if (taps_[i].path == tap.path) {
      ++total;
      if (static_cast<int>(i) <= pos) ++k;
    }
  const int ord = tap.block + 1;
  const char* suffix = (ord % 100 >= 11 && ord % 100 <= 13) ? "th"
                       : ord % 10 == 1                      ? "st"
                       : ord % 10 == 2                      ? "nd"
                       : ord % 10 == 3                      ? "rd"
                                                            : "th";
  std::ostringstream os;
  if (tap.path != TapPath::up) os << to_string(tap.path) << ' ';
  os << k << '/' << total << " (" << ord << suffix << " block@" << tap.resolution << ')';
  return os.str();
}

std::vector<ag::Var> DDAENetwork::param_vars() const {
  std::vector<ag::Var> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.var);
  return out;
}

std::size_t DDAENetwork::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var->value.numel();
  return n;
}

std::uint64_t DDAENetwork::weight_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) h = content_hash(p.var->value, h);
  return h;
}

void DDAENetwork::set_requires_grad(bool on) {
  for (auto& p : params_) p.var->requires_grad = on;
}

ag::Var DDAENetwork::param(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.var;
  throw ContractError("no parameter named '" + name + "'");
}

Tensor timestep_embedding(std::span<const int> t, int dim) {
  const int half = dim / 2;
  Tensor out({static_cast<int>(t.size()), dim});
  const double step = half > 1 ? std::log(10000.0) / (half - 1) : 0.0;
  for (std::size_t n = 0; n < t.size(); ++n)
    for (int i = 0; i < half; ++i) {
      const double arg = static_cast<double>(t[n]) * std::exp(-step * i);
      out[n * static_cast<std::size_t>(dim) + static_cast<std::size_t>(i)] = static_cast<float>(std::sin(arg));
      out[n * static_cast<std::size_t>(dim) + static_cast<std::size_t>(half + i)] =
          static_cast<float>(std::cos(arg));
    }
  return out;
}

DDAENetwork::Output DDAENetwork::run(const ag::Var& x, std::span<const int> t, std::span<const int> capture,
                                     std::optional<int> stop_after) const {
  using namespace ag;
  const Tensor& xv = x->value;
  if (xv.ndim() != 4 || xv.dim(1) != config_.in_channels || xv.dim(2) != config_.image_size ||
      xv.dim(3) != config_.image_size)
    throw ContractError("network input " + shape_str(xv.shape()) + " does not match config (C=" +
                        std::to_string(config_.in_channels) + ", size=" + std::to_string(config_.image_size) + ")");
  if (static_cast<int>(t.size()) != xv.dim(0))
    throw ContractError("need one level per item: " + std::to_string(t.size()) + " levels for batch of " +
                        std::to_string(xv.dim(0)));
  forward_calls_.fetch_add(1);

  auto P = [this](int i) -> const Var& { return params_[static_cast<std::size_t>(i)].var; };
  auto conv = [&](const Var& h, const Conv& c) { return conv2d(h, P(c.w), P(c.b), c.stride, c.pad); };
  auto lin = [&](const Var& h, const Lin& l) { return linear(h, P(l.w), P(l.b)); };
  auto norm = [&](const Var& h, const Norm& n) { return group_norm(h, P(n.g), P(n.b), n.groups); };

  Var temb = constant(timestep_embedding(t, config_.base_channels));
  temb = lin(silu(lin(temb, impl_->dense0)), impl_->dense1);
  const Var temb_act = silu(temb);

  auto resblock = [&](const Var& h, const Res& r) {
    Var y = conv(silu(norm(h, r.n1)), r.c1);
    y = add_channel(y, lin(temb_act, r.temb));
    y = conv(silu(norm(y, r.n2)), r.c2);
    return add(r.skip ? conv(h, *r.skip) : h, y);
  };
  auto attnblock = [&](const Var& h, const Attn& a) {
    const Var hn = norm(h, a.n);
    const Var o = spatial_attention(conv(hn, a.q), conv(hn, a.k), conv(hn, a.v));
    return add(h, conv(o, a.proj));
  };

  Output out;
  // Returns true when the pass should stop.
  auto block = [&](Var& h, const Block& b) {
    h = resblock(h, b.res);
    if (b.attn) h = attnblock(h, *b.attn);
    if (std::find(capture.begin(), capture.end(), b.tap) != capture.end()) out.taps[b.tap] = h;
    return stop_after && *stop_after == b.tap;
  };

  Var h = conv(x, impl_->conv_in);
  std::vector<Var> hs{h};
  const int S = config_.stages();
  for (int s = 0; s < S; ++s) {
    for (const auto& b : impl_->down[static_cast<std::size_t>(s)]) {
      if (block(h, b)) return out;
      hs.push_back(h);
    }
    if (const auto& ds = impl_->downsample[static_cast<std::size_t>(s)]) {
      h = conv(h, *ds);
      hs.push_back(h);
    }
  }
  for (const auto& b : impl_->mid)
    if (block(h, b)) return out;
  for (int s = S - 1; s >= 0; --s) {
    for (const auto& b : impl_->up[static_cast<std::size_t>(s)]) {
      h = concat_channels(h, hs.back());
      hs.pop_back();
      if (block(h, b)) return out;
    }
    if (const auto& us = impl_->upsample[static_cast<std::size_t>(s)]) h = conv(upsample_nearest2x(h), *us);
  }
  out.eps = conv(silu(norm(h, impl_->norm_out)), impl_->conv_out);
  return out;
}

DDAENetwork build_ddae(const DDAEConfig& config, std::uint64_t seed) { return DDAENetwork(config, seed); }

Tensor forward_eps(const DDAENetwork& net, const Tensor& x_t, std::span<const int> t) {
  ag::NoGradGuard ng;
  return net.run(ag::constant(x_t), t).eps->value;
}

TapForward forward_with_tap(const DDAENetwork& net, const Tensor& x_t, std::span<const int> t, const TapId& tap) {
  ag::NoGradGuard ng;
  const int pos = net.tap_position(tap);
  const int cap[] = {pos};
  auto out = net.run(ag::constant(x_t), t, cap);
  return {out.eps->value, out.taps.at(pos)->value};
}

Tensor pooled_tap_features(const DDAENetwork& net, const TapId& tap, const Tensor& x, std::span<const int> t,
                           int chunk) {
  if (static_cast<int>(t.size()) != x.dim(0)) throw ContractError("one level per image required");
  ag::NoGradGuard ng;
  const int pos = net.tap_position(tap);
  const int cap[] = {pos};
  std::vector<Tensor> parts;
  for (int b0 = 0; b0 < x.dim(0); b0 += chunk) {
    const int b1 = std::min(x.dim(0), b0 + chunk);
    auto out = net.run(ag::constant(x.rows(b0, b1)), t.subspan(b0, b1 - b0), cap, pos);
    parts.push_back(ag::global_avg_pool(out.taps.at(pos))->value);
  }
  if (parts.empty()) return Tensor({0, net.tap_channels(tap)});
  return concat_rows(parts);
}

// -------------------------------------------------------------- encoder ----

Encoder::Encoder(DDAENetwork net, TapId tap, int t_fixed)
    : net_(std::move(net)), tap_(tap), tap_pos_(net_.tap_position(tap)), t_fixed_(t_fixed) {}

int Encoder::feature_dim() const { return net_.tap_channels(tap_); }

ag::Var Encoder::features(const ag::Var& x, std::span<const int> t) const {
  const int cap[] = {tap_pos_};
  auto out = net_.run(x, t, cap, tap_pos_);
  return ag::global_avg_pool(out.taps.at(tap_pos_));
}

Tensor Encoder::encode(const Tensor& x) const {
  std::vector<int> t(static_cast<std::size_t>(x.dim(0)), t_fixed_);
  return encode_at(x, t);
}

Tensor Encoder::encode_at(const Tensor& x, std::span<const int> t) const {
  ag::NoGradGuard ng;
  return features(ag::constant(x), t)->value;
}

Encoder truncate(const DDAENetwork& net, const TapId& tap, int t_fixed) {
  net.tap_position(tap);
  if (t_fixed < 0) throw ContractError("t_fixed must be non-negative");
  return Encoder(net.clone(), tap, t_fixed);
}

}  // namespace ddae
