#include "rafd/net.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "rafd/ops.hpp"
#include "rafd/snapshot.hpp"

namespace rafd {

using nlohmann::json;

void NetConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("NetConfig: " + m); };
  GridSpec{hf, wf, stride}.validate();
  if (cf < 2 || cf % 2 != 0) fail("cf must be even and positive");
  if (window_h < 2 || window_w < 2 || hf % window_h != 0 || wf % window_w != 0)
    fail("window must be at least 2 and divide the feature map");
  if (hf % (2 * (window_h / 2)) != 0 || wf % (2 * (window_w / 2)) != 0) fail("feature map must be divisible by 2*shift");
  if (k_queries == 0 || k_queries > hf * wf) fail("k_queries must lie in [1, hf*wf]");
  if (n_deform_points == 0) fail("n_deform_points must be positive");
  if (c_stem == 0 || c_mid == 0 || c_deep == 0 || ffn_mult == 0) fail("channel widths must be positive");
}

json NetConfig::to_json() const {
  return json{{"cf", cf},
              {"hf", hf},
              {"wf", wf},
              {"k_queries", k_queries},
              {"n_deform_points", n_deform_points},
              {"window_h", window_h},
              {"window_w", window_w},
              {"n_enhance_blocks", n_enhance_blocks},
              {"n_cross_blocks", n_cross_blocks},
              {"n_prop_blocks", n_prop_blocks},
              {"n_decoder_layers", n_decoder_layers},
              {"c_stem", c_stem},
              {"c_mid", c_mid},
              {"c_deep", c_deep},
              {"ffn_mult", ffn_mult},
              {"flow_guided", flow_guided}};
}

NetConfig NetConfig::from_json(const json& j) {
  NetConfig c;
  c.cf = j.at("cf");
  c.hf = j.at("hf");
  c.wf = j.at("wf");
  c.k_queries = j.at("k_queries");
  c.n_deform_points = j.at("n_deform_points");
  c.window_h = j.at("window_h");
  c.window_w = j.at("window_w");
  c.n_enhance_blocks = j.at("n_enhance_blocks");
  c.n_cross_blocks = j.at("n_cross_blocks");
  c.n_prop_blocks = j.at("n_prop_blocks");
  c.n_decoder_layers = j.at("n_decoder_layers");
  c.c_stem = j.at("c_stem");
  c.c_mid = j.at("c_mid");
  c.c_deep = j.at("c_deep");
  c.ffn_mult = j.at("ffn_mult");
  c.flow_guided = j.at("flow_guided");
  return c;
}

// ---- free functions ----

template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& map) {
  if (map.rank() != 3) throw ShapeError("map_to_tokens: expected C x H x W, got " + shape_str(map.shape()));
  return transpose2d(reshape(map, {map.dim(0), map.dim(1) * map.dim(2)}));
}

template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, std::size_t h, std::size_t w) {
  return reshape(transpose2d(tokens), {tokens.dim(1), h, w});
}

template <typename T>
std::vector<Query> topk_queries(const Tensor<T>& heatmap, std::size_t k) {
  if (heatmap.rank() != 3 || heatmap.dim(0) != 1)
    throw ShapeError("topk_queries: expected 1 x H x W heatmap, got " + shape_str(heatmap.shape()));
  const std::size_t h = heatmap.dim(1), w = heatmap.dim(2);
  if (k > h * w) throw std::invalid_argument("topk_queries: k exceeds the number of cells");
  const auto v = heatmap.data();
  std::vector<Query> peaks, rest;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const T c = v[i * w + j];
      bool peak = true;
      for (std::size_t a = i ? i - 1 : 0; a <= std::min(h - 1, i + 1) && peak; ++a)
        for (std::size_t b = j ? j - 1 : 0; b <= std::min(w - 1, j + 1); ++b)
          if (v[a * w + b] > c) {
            peak = false;
            break;
          }
      (peak ? peaks : rest).push_back({i * w + j, static_cast<double>(c)});
    }
  auto by_score = [](const Query& a, const Query& b) { return a.score > b.score || (a.score == b.score && a.cell < b.cell); };
  std::stable_sort(peaks.begin(), peaks.end(), by_score);
  std::stable_sort(rest.begin(), rest.end(), by_score);
  peaks.insert(peaks.end(), rest.begin(), rest.end());
  peaks.resize(k);
  return peaks;
}

std::vector<std::size_t> window_partition_index(std::size_t h, std::size_t w, std::size_t wh, std::size_t ww,
                                                std::size_t shift) {
  if (wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0)
    throw std::invalid_argument("window_partition_index: window must divide the map");
  std::vector<std::size_t> order;
  order.reserve(h * w);
  for (std::size_t by = 0; by < h / wh; ++by)
    for (std::size_t bx = 0; bx < w / ww; ++bx)
      for (std::size_t a = 0; a < wh; ++a)
        for (std::size_t b = 0; b < ww; ++b) {
          const std::size_t y = (by * wh + a + shift) % h, x = (bx * ww + b + shift) % w;
          order.push_back(y * w + x);
        }
  return order;
}

template <typename T>
Tensor<T> cost_volume(const Tensor<T>& e_t, const Tensor<T>& e_prev) {
  if (e_t.rank() != 3 || e_t.shape() != e_prev.shape())
    throw ShapeError("cost_volume: expected matching C x H x W maps, got " + shape_str(e_t.shape()) + " and " +
                     shape_str(e_prev.shape()));
  const std::size_t c = e_t.dim(0), h = e_t.dim(1), w = e_t.dim(2);
  Tensor<T> m = matmul(map_to_tokens(e_t), reshape(e_prev, {c, h * w}));
  return reshape(scale(m, static_cast<T>(1.0 / std::sqrt(static_cast<double>(c)))), {h, w, h, w});
}

template <typename T>
Tensor<T> flow_from_cost(const Tensor<T>& cost, const Tensor<T>& grid) {
  if (cost.rank() != 4 || grid.rank() != 3 || grid.dim(0) != 2 || cost.dim(0) != grid.dim(1) ||
      cost.dim(1) != grid.dim(2) || cost.dim(2) != grid.dim(1) || cost.dim(3) != grid.dim(2))
    throw ShapeError("flow_from_cost: cost " + shape_str(cost.shape()) + " does not match grid " +
                     shape_str(grid.shape()));
  const std::size_t h = grid.dim(1), w = grid.dim(2), n = h * w;
  Tensor<T> prob = softmax(reshape(cost, {n, n}), {1});
  Tensor<T> matched = matmul(prob, map_to_tokens(grid));
  return sub(grid, tokens_to_map(matched, h, w));
}

template <typename T>
Tensor<T> flow_guided_refs(const Tensor<T>& flow, const Tensor<T>& grid) {
  return sub(grid, flow);
}

// ---- network ----

namespace {

std::string idx(const std::string& prefix, std::size_t i) { return prefix + std::to_string(i); }

}  // namespace

template <typename T>
RaFDNet<T>::RaFDNet(const NetConfig& config, std::uint64_t seed) : cfg_(config), store_(seed) {
  cfg_.validate();
  const std::size_t cf = cfg_.cf, c2 = cf / 2, n = cfg_.cells();
  auto he = [](std::size_t fan_in) { return Init::normal(std::sqrt(2.0 / static_cast<double>(fan_in))); };
  auto conv = [&](const std::string& name, std::size_t cout, std::size_t cin, std::size_t k, bool bias) {
    store_.add(name + ".w", {cout, cin, k, k}, he(cin * k * k));
    if (bias) store_.add(name + ".b", {cout}, Init::zeros());
  };
  auto bn = [&](const std::string& name, std::size_t c) {
    store_.add(name + ".g", {c}, Init::constant(1.0));
    store_.add(name + ".b", {c}, Init::zeros());
    store_.add_buffer(name + ".rm", {c}, T(0));
    store_.add_buffer(name + ".rv", {c}, T(1));
  };
  auto linear = [&](const std::string& name, std::size_t out, std::size_t in) {
    store_.add(name + ".w", {out, in}, Init::uniform(1.0 / std::sqrt(static_cast<double>(in))));
    store_.add(name + ".b", {out}, Init::zeros());
  };
  auto norm = [&](const std::string& name, std::size_t c) {
    store_.add(name + ".g", {c}, Init::constant(1.0));
    store_.add(name + ".b", {c}, Init::zeros());
  };
  auto ffn = [&](const std::string& prefix, std::size_t c) {
    norm(prefix + ".ln2", c);
    linear(prefix + ".ffn1", cfg_.ffn_mult * c, c);
    linear(prefix + ".ffn2", c, cfg_.ffn_mult * c);
  };
  auto attention = [&](const std::string& prefix, std::size_t c, bool cross) {
    norm(prefix + ".ln1", c);
    if (cross) norm(prefix + ".ln_kv", c);
    for (const char* m : {".q", ".k", ".v", ".o"}) linear(prefix + m, c, c);
    ffn(prefix, c);
  };

  conv("bb.stem", cfg_.c_stem, 1, 3, false);
  bn("bb.stem.bn", cfg_.c_stem);
  auto stage = [&](const std::string& prefix, std::size_t cin, std::size_t cout) {
    conv(prefix + ".c1", cout, cin, 3, false);
    bn(prefix + ".c1.bn", cout);
    conv(prefix + ".c2", cout, cout, 3, false);
    bn(prefix + ".c2.bn", cout);
    conv(prefix + ".skip", cout, cin, 1, true);
  };
  stage("bb.s1", cfg_.c_stem, cfg_.c_mid);
  stage("bb.s2", cfg_.c_mid, cfg_.c_deep);
  conv("bb.neck", cf, cfg_.c_deep, 1, true);

  store_.add("enh.pos", {n, cf}, Init::normal(0.1));
  for (std::size_t b = 0; b < cfg_.n_enhance_blocks; ++b) {
    attention(idx("enh.b", b) + ".w", cf, false);
    attention(idx("enh.b", b) + ".sw", cf, false);
  }

  conv("flow.c1", c2, cf, 3, false);
  bn("flow.c1.bn", c2);
  conv("flow.c2", c2, c2, 3, false);
  bn("flow.c2.bn", c2);
  store_.add("cross.pos", {n, c2}, Init::normal(0.1));
  for (std::size_t l = 0; l < cfg_.n_cross_blocks; ++l) attention(idx("cross.b", l), c2, true);

  const std::size_t np = cfg_.n_deform_points;
  for (std::size_t l = 0; l < cfg_.n_prop_blocks; ++l) {
    const std::string pre = idx("prop.b", l);
    norm(pre + ".ln1", cf);
    store_.add(pre + ".off.w", {2 * np, cf}, Init::normal(0.01));
    store_.add(pre + ".off.b", {2 * np}, Init::zeros());
    // Initial sampling pattern: points on a circle of radius 1/sqrt(2),
    // starting on the diagonal so offsets avoid integer cell positions.
    auto ob = store_.get(pre + ".off.b").data_mut();
    for (std::size_t k = 0; k < np; ++k) {
      const double a = std::numbers::pi / 4 + 2 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(np);
      ob[2 * k] = static_cast<T>(std::sqrt(0.5) * std::cos(a));
      ob[2 * k + 1] = static_cast<T>(std::sqrt(0.5) * std::sin(a));
    }
    store_.add(pre + ".attw.w", {np, cf}, Init::normal(0.01));
    store_.add(pre + ".attw.b", {np}, Init::zeros());
    linear(pre + ".val", cf, cf);
    linear(pre + ".o", cf, cf);
    ffn(pre, cf);
  }

  conv("head.c1", cf, cf, 3, true);
  conv("head.c2", 1, cf, 1, true);
  // Sigmoid prior of about 0.1 keeps the initial focal loss well scaled.
  store_.get("head.c2.b").data_mut()[0] = static_cast<T>(-2.19);

  store_.add("dec.pos", {n, cf}, Init::normal(0.1));
  store_.add("dec.query", {cfg_.k_queries, cf}, Init::normal(0.1));
  for (std::size_t l = 0; l < cfg_.n_decoder_layers; ++l) attention(idx("dec.l", l), cf, true);
  norm("dec.ln_out", cf);
  linear("dec.off", 2, cf);
  linear("dec.size", 2, cf);
  linear("dec.ang", 2, cf);

  grid_ = grid_coords<T>(cfg_.grid());

  auto plan = [&](std::size_t shift) {
    WindowPlan wp;
    const std::size_t h = cfg_.hf, w = cfg_.wf, wh = cfg_.window_h, ww = cfg_.window_w;
    wp.order = window_partition_index(h, w, wh, ww, shift);
    wp.inverse.resize(wp.order.size());
    for (std::size_t r = 0; r < wp.order.size(); ++r) wp.inverse[wp.order[r]] = r;
    wp.window_len = wh * ww;
    if (shift == 0) return wp;
    // Tokens that wrapped around during the cyclic shift only attend within
    // their own region.
    auto region = [](std::size_t v, std::size_t size, std::size_t win, std::size_t s) {
      return v < size - win ? 0 : (v < size - s ? 1 : 2);
    };
    const std::size_t sh = wh / 2, sw = ww / 2;
    for (std::size_t by = 0; by < h / wh; ++by)
      for (std::size_t bx = 0; bx < w / ww; ++bx) {
        std::vector<int> label;
        for (std::size_t a = 0; a < wh; ++a)
          for (std::size_t b = 0; b < ww; ++b)
            label.push_back(3 * region(by * wh + a, h, wh, sh) + region(bx * ww + b, w, ww, sw));
        std::vector<std::uint8_t> m(wp.window_len * wp.window_len);
        for (std::size_t a = 0; a < wp.window_len; ++a)
          for (std::size_t b = 0; b < wp.window_len; ++b) m[a * wp.window_len + b] = label[a] == label[b];
        wp.masks.push_back(std::move(m));
      }
    return wp;
  };
  plain_ = plan(0);
  shifted_ = plan(cfg_.window_h / 2);
  if (cfg_.window_h / 2 != cfg_.window_w / 2) {
    // Shifted index assumes one shift for both axes.
    throw std::invalid_argument("NetConfig: window_h and window_w must give the same shift");
  }
}

template <typename T>
Tensor<T> RaFDNet<T>::bn(const std::string& prefix, const Tensor<T>& x) {
  Tensor<T> rm = p(prefix + ".rm"), rv = p(prefix + ".rv");
  return batchnorm2d(x, p(prefix + ".g"), p(prefix + ".b"), rm, rv, static_cast<T>(1e-5),
                     training_ ? BatchNormMode::Train : BatchNormMode::Eval);
}

template <typename T>
Tensor<T> RaFDNet<T>::conv_bn(const std::string& prefix, const Tensor<T>& x, std::size_t stride, std::size_t pad,
                              bool relu_out) {
  Tensor<T> y = bn(prefix + ".bn", conv2d(x, p(prefix + ".w"), Tensor<T>(), stride, pad));
  return relu_out ? relu(y) : y;
}

template <typename T>
Tensor<T> RaFDNet<T>::lin(const std::string& prefix, const Tensor<T>& x) {
  return linear(x, p(prefix + ".w"), p(prefix + ".b"));
}

template <typename T>
Tensor<T> RaFDNet<T>::ln(const std::string& prefix, const Tensor<T>& x) {
  return layer_norm(x, p(prefix + ".g"), p(prefix + ".b"));
}

template <typename T>
Tensor<T> RaFDNet<T>::ffn(const std::string& prefix, const Tensor<T>& x) {
  return lin(prefix + ".ffn2", relu(lin(prefix + ".ffn1", x)));
}

template <typename T>
Tensor<T> RaFDNet<T>::backbone_neck(const Tensor<T>& images) {
  const bool single = images.rank() == 3;
  Tensor<T> x = single ? reshape(images, {1, images.dim(0), images.dim(1), images.dim(2)}) : images;
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != cfg_.image_size_h() || x.dim(3) != cfg_.image_size_w())
    throw ShapeError("backbone_neck: expected N x 1 x " + std::to_string(cfg_.image_size_h()) + " x " +
                     std::to_string(cfg_.image_size_w()) + " images, got " + shape_str(images.shape()));
  x = conv_bn("bb.stem", x, 2, 1, true);
  for (const auto& [name, stride] : {std::pair<std::string, std::size_t>{"bb.s1", 2}, {"bb.s2", 1}}) {
    Tensor<T> m = conv_bn(name + ".c1", x, stride, 1, true);
    m = conv_bn(name + ".c2", m, 1, 1, false);
    x = relu(add(m, conv2d(x, p(name + ".skip.w"), p(name + ".skip.b"), stride, 0)));
  }
  x = conv2d(x, p("bb.neck.w"), p("bb.neck.b"), 1, 0);
  return single ? reshape(x, {cfg_.cf, cfg_.hf, cfg_.wf}) : x;
}

template <typename T>
Tensor<T> RaFDNet<T>::window_block(const std::string& prefix, const Tensor<T>& x, std::size_t shift) {
  const WindowPlan& plan = shift ? shifted_ : plain_;
  Tensor<T> xn = ln(prefix + ".ln1", x);
  Tensor<T> q = gather_rows(lin(prefix + ".q", xn), plan.order);
  Tensor<T> k = gather_rows(lin(prefix + ".k", xn), plan.order);
  Tensor<T> v = gather_rows(lin(prefix + ".v", xn), plan.order);
  const std::size_t len = plan.window_len, nw = plan.order.size() / len;
  std::vector<Tensor<T>> parts;
  for (std::size_t wi = 0; wi < nw; ++wi) {
    const std::size_t a = wi * len, b = a + len;
    parts.push_back(scaled_dot_attention(slice0(q, a, b), slice0(k, a, b), slice0(v, a, b),
                                         plan.masks.empty() ? nullptr : &plan.masks[wi]));
  }
  Tensor<T> attn = gather_rows(concat0(parts), plan.inverse);
  Tensor<T> y = add(x, lin(prefix + ".o", attn));
  return add(y, ffn(prefix, ln(prefix + ".ln2", y)));
}

template <typename T>
Tensor<T> RaFDNet<T>::enhance(const Tensor<T>& feat) {
  if (feat.rank() != 3 || feat.dim(0) != cfg_.cf || feat.dim(1) != cfg_.hf || feat.dim(2) != cfg_.wf)
    throw ShapeError("enhance: expected " + std::to_string(cfg_.cf) + " x " + std::to_string(cfg_.hf) + " x " +
                     std::to_string(cfg_.wf) + " features, got " + shape_str(feat.shape()));
  Tensor<T> x = add(map_to_tokens(feat), p("enh.pos"));
  for (std::size_t b = 0; b < cfg_.n_enhance_blocks; ++b) {
    x = window_block(idx("enh.b", b) + ".w", x, 0);
    x = window_block(idx("enh.b", b) + ".sw", x, cfg_.window_h / 2);
  }
  return tokens_to_map(x, cfg_.hf, cfg_.wf);
}

template <typename T>
Tensor<T> RaFDNet<T>::flow_feat(const Tensor<T>& s) {
  return conv_bn("flow.c2", conv_bn("flow.c1", s, 1, 1, true), 1, 1, false);
}

template <typename T>
Tensor<T> RaFDNet<T>::cross_block(std::size_t layer, const Tensor<T>& x, const Tensor<T>& src) {
  const std::string pre = idx("cross.b", layer);
  Tensor<T> xq = ln(pre + ".ln1", x), xs = ln(pre + ".ln_kv", src);
  Tensor<T> a = scaled_dot_attention(lin(pre + ".q", xq), lin(pre + ".k", xs), lin(pre + ".v", xs));
  Tensor<T> y = add(x, lin(pre + ".o", a));
  return add(y, ffn(pre, ln(pre + ".ln2", y)));
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> RaFDNet<T>::cross_attend(const Tensor<T>& e_prev, const Tensor<T>& e_t) {
  if (e_prev.shape() != e_t.shape()) throw ShapeError("cross_attend: feature shapes differ");
  Tensor<T> pv = add(map_to_tokens(e_prev), p("cross.pos"));
  Tensor<T> cu = add(map_to_tokens(e_t), p("cross.pos"));
  for (std::size_t l = 0; l < cfg_.n_cross_blocks; ++l) {
    pv = cross_block(l, pv, cu);
    cu = cross_block(l, cu, pv);
  }
  return {tokens_to_map(pv, cfg_.hf, cfg_.wf), tokens_to_map(cu, cfg_.hf, cfg_.wf)};
}

template <typename T>
Tensor<T> RaFDNet<T>::estimate_flow(const Tensor<T>& e_prev_aligned, const Tensor<T>& e_t) {
  auto [ep, et] = cross_attend(e_prev_aligned, e_t);
  return flow_from_cost(cost_volume(et, ep), grid_);
}

template <typename T>
Tensor<T> RaFDNet<T>::deform_attend(std::size_t block, const Tensor<T>& query, const Tensor<T>& value_map,
                                    const Tensor<T>& refs) {
  const std::string pre = idx("prop.b", block);
  const std::size_t n = query.dim(0), np = cfg_.n_deform_points, c = value_map.dim(0);
  Tensor<T> off = transpose2d(reshape(lin(pre + ".off", query), {n * np, 2}));
  Tensor<T> weights = softmax(lin(pre + ".attw", query), {1});
  std::vector<std::size_t> rep(n * np);
  for (std::size_t i = 0; i < rep.size(); ++i) rep[i] = i / np;
  Tensor<T> ref_pts = transpose2d(gather_rows(transpose2d(reshape(refs, {2, n})), rep));
  Tensor<T> samples = grid_sample_bilinear(value_map, add(ref_pts, off), Tensor<T>(Shape{c, 1}, T(0)));
  return transpose2d(group_weighted_sum(samples, weights));
}

template <typename T>
Tensor<T> RaFDNet<T>::propagate_from_refs(const Tensor<T>& s_t, const Tensor<T>& s_prev, const Tensor<T>& refs) {
  if (s_t.shape() != s_prev.shape()) throw ShapeError("propagate: feature shapes differ");
  Tensor<T> x = map_to_tokens(s_t);
  Tensor<T> prev_tokens = map_to_tokens(s_prev);
  for (std::size_t l = 0; l < cfg_.n_prop_blocks; ++l) {
    const std::string pre = idx("prop.b", l);
    Tensor<T> vmap = tokens_to_map(lin(pre + ".val", prev_tokens), cfg_.hf, cfg_.wf);
    Tensor<T> a = deform_attend(l, ln(pre + ".ln1", x), vmap, refs);
    x = add(x, lin(pre + ".o", a));
    x = add(x, ffn(pre, ln(pre + ".ln2", x)));
  }
  return tokens_to_map(x, cfg_.hf, cfg_.wf);
}

template <typename T>
Tensor<T> RaFDNet<T>::propagate(const Tensor<T>& s_t, const Tensor<T>& s_prev, const Tensor<T>& flow) {
  return propagate_from_refs(s_t, s_prev, cfg_.flow_guided ? flow_guided_refs(flow, grid_) : grid_);
}

template <typename T>
Tensor<T> RaFDNet<T>::center_heatmap(const Tensor<T>& t_hat) {
  Tensor<T> x = relu(conv2d(t_hat, p("head.c1.w"), p("head.c1.b"), 1, 1));
  return sigmoid(conv2d(x, p("head.c2.w"), p("head.c2.b"), 1, 0));
}

template <typename T>
void RaFDNet<T>::detr_refine(const std::vector<std::size_t>& cells, const Tensor<T>& t_hat, const Tensor<T>& heatmap,
                             ForwardOutput<T>& out) {
  const std::size_t k = cells.size();
  if (k == 0 || k > cfg_.k_queries) throw std::invalid_argument("detr_refine: need 1..k_queries query cells");
  Tensor<T> mem = add(map_to_tokens(t_hat), p("dec.pos"));
  Tensor<T> q = add(gather_rows(mem, cells), slice0(p("dec.query"), 0, k));
  for (std::size_t l = 0; l < cfg_.n_decoder_layers; ++l) {
    const std::string pre = idx("dec.l", l);
    Tensor<T> qn = ln(pre + ".ln1", q), mn = ln(pre + ".ln_kv", mem);
    q = add(q, lin(pre + ".o", scaled_dot_attention(lin(pre + ".q", qn), lin(pre + ".k", mn), lin(pre + ".v", mn))));
    q = add(q, ffn(pre, ln(pre + ".ln2", q)));
  }
  Tensor<T> qf = ln("dec.ln_out", q);
  out.offsets = tanh(lin("dec.off", qf));
  out.log_size = lin("dec.size", qf);
  out.angle = lin("dec.ang", qf);
  out.query_cells = cells;
  out.heatmap = heatmap;
  out.detections.clear();
  const auto off = out.offsets.data(), ls = out.log_size.data(), ang = out.angle.data();
  for (std::size_t i = 0; i < k; ++i) {
    Detection d;
    d.cell = cells[i];
    d.cx = static_cast<double>(cells[i] % cfg_.wf) + static_cast<double>(off[2 * i]);
    d.cy = static_cast<double>(cells[i] / cfg_.wf) + static_cast<double>(off[2 * i + 1]);
    d.w = std::exp(static_cast<double>(ls[2 * i]));
    d.h = std::exp(static_cast<double>(ls[2 * i + 1]));
    d.theta = 0.5 * std::atan2(static_cast<double>(ang[2 * i]), static_cast<double>(ang[2 * i + 1]));
    d.score = static_cast<double>(heatmap.data()[cells[i]]);
    out.detections.push_back(d);
  }
}

template <typename T>
Tensor<T> RaFDNet<T>::head_features(const Tensor<T>& frames_feat, std::size_t m) {
  return reshape(slice0(frames_feat, m, m + 1), {frames_feat.dim(1), frames_feat.dim(2), frames_feat.dim(3)});
}

template <typename T>
std::vector<std::size_t> RaFDNet<T>::default_cells(const Tensor<T>& heatmap) const {
  std::vector<std::size_t> cells;
  for (const auto& q : topk_queries(heatmap, cfg_.k_queries)) cells.push_back(q.cell);
  return cells;
}

namespace {

template <typename T>
Tensor<T> stack_frames(const std::vector<Tensor<T>>& frames) {
  std::vector<Tensor<T>> parts;
  for (const auto& f : frames) {
    if (f.rank() != 3) throw ShapeError("forward: frames must be 1 x H x W, got " + shape_str(f.shape()));
    parts.push_back(reshape(f, {1, f.dim(0), f.dim(1), f.dim(2)}));
  }
  return concat0(parts);
}

}  // namespace

template <typename T>
ForwardOutput<T> RaFDNet<T>::forward_pair(const Tensor<T>& frame_prev, const Tensor<T>& frame_t, const Pose2& pose,
                                          const std::vector<std::size_t>* query_cells) {
  Tensor<T> feats = backbone_neck(stack_frames<T>({frame_prev, frame_t}));
  Tensor<T> s_prev = enhance(head_features(feats, 0));
  Tensor<T> s_t = enhance(head_features(feats, 1));
  const Shape one{1, cfg_.cf, cfg_.hf, cfg_.wf};
  Tensor<T> e = flow_feat(concat0(std::vector<Tensor<T>>{reshape(s_prev, one), reshape(s_t, one)}));
  Tensor<T> e_prev = head_features(e, 0), e_t = head_features(e, 1);
  Tensor<T> flow = estimate_flow(align_to_current(e_prev, pose, e_t), e_t);
  Tensor<T> t_hat = propagate(s_t, align_to_current(s_prev, pose, s_t), flow);

  ForwardOutput<T> out;
  out.flows = {flow};
  out.features = t_hat;
  Tensor<T> hm = center_heatmap(t_hat);
  detr_refine(query_cells ? *query_cells : default_cells(hm), t_hat, hm, out);
  return out;
}

template <typename T>
ForwardOutput<T> RaFDNet<T>::forward_multiframe(const std::vector<Tensor<T>>& frames, const std::vector<Pose2>& poses,
                                                const std::vector<std::size_t>* query_cells) {
  return forward_multiframe_select(frames, poses, [&](const Tensor<T>& hm) {
    return query_cells ? *query_cells : default_cells(hm);
  });
}

template <typename T>
ForwardOutput<T> RaFDNet<T>::forward_multiframe_select(const std::vector<Tensor<T>>& frames,
                                                       const std::vector<Pose2>& poses, const QuerySelector& select) {
  const std::size_t n = frames.size();
  if (n < 2) throw std::invalid_argument("forward_multiframe: need at least 2 frames");
  if (poses.size() != n - 1)
    throw std::invalid_argument("forward_multiframe: " + std::to_string(n) + " frames need " + std::to_string(n - 1) +
                                " poses, got " + std::to_string(poses.size()));
  Tensor<T> feats = backbone_neck(stack_frames(frames));
  std::vector<Tensor<T>> s(n), s_stack(n);
  const Shape one{1, cfg_.cf, cfg_.hf, cfg_.wf};
  for (std::size_t m = 0; m < n; ++m) {
    s[m] = enhance(head_features(feats, m));
    s_stack[m] = reshape(s[m], one);
  }
  Tensor<T> e = flow_feat(concat0(s_stack));

  ForwardOutput<T> out;
  Tensor<T> prop = s[0];
  Tensor<T> e_prev = head_features(e, 0);
  for (std::size_t m = 1; m < n; ++m) {
    Tensor<T> e_m = head_features(e, m);
    Tensor<T> flow = estimate_flow(align_to_current(e_prev, poses[m - 1], e_m), e_m);
    prop = propagate(s[m], align_to_current(prop, poses[m - 1], s[m]), flow);
    out.flows.push_back(flow);
    e_prev = e_m;
  }
  out.features = prop;
  Tensor<T> hm = center_heatmap(prop);
  detr_refine(select(hm.detach()), prop, hm, out);
  return out;
}

// ---- checkpoints ----

namespace {

std::filesystem::path with_ext(const std::filesystem::path& stem, const char* ext) {
  return std::filesystem::path(stem.string() + ext);
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& stem, const RaFDNet<T>& net,
                     const std::vector<NamedTensor<T>>& extra_tensors, std::uint64_t step, const json& extra) {
  std::vector<NamedTensor<T>> all;
  for (const auto& name : net.store().names()) all.push_back({name, net.store().get(name)});
  all.insert(all.end(), extra_tensors.begin(), extra_tensors.end());

  const auto bin = with_ext(stem, ".bin");
  std::ofstream os(bin, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + bin.string() + " for writing");
  json index = json::object();
  std::size_t offset = 0;
  for (const auto& t : all) {
    if (index.contains(t.name)) throw std::invalid_argument("save_checkpoint: duplicate tensor name " + t.name);
    index[t.name] = {{"offset", offset}, {"shape", t.tensor.shape()}};
    write_snapshot(os, t.tensor);
    offset += snapshot_size(t.tensor.shape());
  }
  if (!os) throw std::runtime_error("write failed for " + bin.string());
  os.close();

  json meta{{"config", net.config().to_json()}, {"step", step}, {"extra", extra}, {"tensors", index}};
  const auto js = with_ext(stem, ".json");
  std::ofstream oj(js, std::ios::binary);
  if (!oj) throw std::runtime_error("cannot open " + js.string() + " for writing");
  oj << meta.dump(2) << "\n";
  if (!oj) throw std::runtime_error("write failed for " + js.string());
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& stem) {
  const auto js = with_ext(stem, ".json");
  std::ifstream is(js, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + js.string());
  try {
    const json meta = json::parse(is);
    return {NetConfig::from_json(meta.at("config")), meta.at("step").get<std::uint64_t>(), meta.at("extra"),
            meta.at("tensors")};
  } catch (const json::exception& e) {
    throw std::runtime_error(js.string() + ": " + e.what());
  }
}

template <typename T>
std::vector<NamedTensor<T>> load_checkpoint(const std::filesystem::path& stem, RaFDNet<T>& net) {
  const CheckpointInfo info = read_checkpoint_info(stem);
  if (!(info.config == net.config()))
    throw std::runtime_error("checkpoint " + stem.string() + ": network config mismatch (checkpoint " +
                             info.config.to_json().dump() + ", requested " + net.config().to_json().dump() + ")");
  const auto bin = with_ext(stem, ".bin");
  std::ifstream is(bin, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + bin.string());
  auto read_at = [&](const std::string& name) {
    is.clear();
    is.seekg(static_cast<std::streamoff>(info.index.at(name).at("offset").get<std::size_t>()));
    try {
      return read_snapshot<T>(is);
    } catch (const std::runtime_error& e) {
      throw std::runtime_error(bin.string() + " (" + name + "): " + e.what());
    }
  };
  for (const auto& name : net.store().names()) {
    if (!info.index.contains(name)) throw std::runtime_error("checkpoint " + stem.string() + " lacks tensor " + name);
    Tensor<T> src = read_at(name);
    Tensor<T> dst = net.store().get(name);
    if (src.shape() != dst.shape())
      throw std::runtime_error("checkpoint " + stem.string() + ": shape mismatch for " + name);
    std::copy(src.data().begin(), src.data().end(), dst.data_mut().begin());
  }
  // Extras come back in file order so that a save of the result reproduces the file.
  std::vector<std::pair<std::size_t, std::string>> extra_names;
  for (const auto& [name, entry] : info.index.items())
    if (!net.store().contains(name)) extra_names.emplace_back(entry.at("offset").template get<std::size_t>(), name);
  std::sort(extra_names.begin(), extra_names.end());
  std::vector<NamedTensor<T>> extras;
  for (const auto& [offset, name] : extra_names) extras.push_back({name, read_at(name)});
  return extras;
}

#define RAFD_INSTANTIATE_NET(T)                                                                                  \
  template class RaFDNet<T>;                                                                                     \
  template Tensor<T> map_to_tokens(const Tensor<T>&);                                                            \
  template Tensor<T> tokens_to_map(const Tensor<T>&, std::size_t, std::size_t);                                  \
  template std::vector<Query> topk_queries(const Tensor<T>&, std::size_t);                                       \
  template Tensor<T> cost_volume(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> flow_from_cost(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> flow_guided_refs(const Tensor<T>&, const Tensor<T>&);                                       \
  template void save_checkpoint(const std::filesystem::path&, const RaFDNet<T>&, const std::vector<NamedTensor<T>>&, \
                                std::uint64_t, const json&);                                                     \
  template std::vector<NamedTensor<T>> load_checkpoint(const std::filesystem::path&, RaFDNet<T>&);

RAFD_INSTANTIATE_NET(float)
RAFD_INSTANTIATE_NET(double)
#undef RAFD_INSTANTIATE_NET

}  // namespace rafd
