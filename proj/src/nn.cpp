#include "dr4sr/nn.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace dr4sr::nn {

Var ParamSet::add_normal(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                         Rng& rng, double stddev) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal(0.0, stddev);
  Var v(std::move(m), true);
  items_.emplace_back(name, v);
  return v;
}

Var ParamSet::add_constant(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                           double fill) {
  Var v(Matrix::Constant(rows, cols, fill), true);
  items_.emplace_back(name, v);
  return v;
}

std::vector<Var> ParamSet::vars() const {
  std::vector<Var> out;
  out.reserve(items_.size());
  for (const auto& [name, v] : items_) out.push_back(v);
  return out;
}

Var ParamSet::find(const std::string& name) const {
  for (const auto& [n, v] : items_)
    if (n == name) return v;
  throw std::invalid_argument("ParamSet::find: no parameter named " + name);
}

std::vector<Matrix> ParamSet::snapshot() const {
  std::vector<Matrix> out;
  out.reserve(items_.size());
  for (const auto& [n, v] : items_) out.push_back(v.value());
  return out;
}

void ParamSet::restore(const std::vector<Matrix>& snap) {
  if (snap.size() != items_.size())
    throw std::invalid_argument("ParamSet::restore: size mismatch");
  for (std::size_t i = 0; i < snap.size(); ++i) {
    auto& v = items_[i].second;
    const_cast<Var&>(v).raw() = snap[i];
  }
}

nlohmann::ordered_json ParamSet::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [name, v] : items_) {
    nlohmann::ordered_json entry;
    entry["rows"] = v.rows();
    entry["cols"] = v.cols();
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(v.rows() * v.cols()));
    for (Eigen::Index r = 0; r < v.rows(); ++r)
      for (Eigen::Index c = 0; c < v.cols(); ++c) data.push_back(v.value()(r, c));
    entry["data"] = std::move(data);
    j[name] = std::move(entry);
  }
  return j;
}

void ParamSet::load_json(const nlohmann::ordered_json& j) {
  for (auto& [name, var] : items_) {
    if (!j.contains(name))
      throw std::invalid_argument("checkpoint missing parameter " + name);
    const auto& entry = j.at(name);
    const Eigen::Index rows = entry.at("rows").get<Eigen::Index>();
    const Eigen::Index cols = entry.at("cols").get<Eigen::Index>();
    if (rows != var.rows() || cols != var.cols())
      throw std::invalid_argument("checkpoint shape mismatch for " + name);
    const auto& data = entry.at("data");
    Matrix m(rows, cols);
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data.at(k++).get<double>();
    var.raw() = std::move(m);
  }
}

AdamOptimizer::AdamOptimizer(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamOptimizer::step(std::vector<Var>& params, const std::vector<Matrix>& grads) {
  if (params.size() != grads.size())
    throw std::invalid_argument("AdamOptimizer::step: size mismatch");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(Matrix::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i].array().matrix() +
            (1.0 - beta2_) * grads[i].cwiseProduct(grads[i]);
    const Matrix m_hat = m_[i] / bc1;
    const Matrix v_hat = v_[i] / bc2;
    params[i].raw().array() -=
        lr_ * (m_hat.array() / (v_hat.array().sqrt() + eps_));
  }
}

void sgd_step(std::vector<Var>& params, const std::vector<Matrix>& grads, double lr,
              double weight_decay) {
  if (params.size() != grads.size())
    throw std::invalid_argument("sgd_step: size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i)
    params[i].raw() -= lr * (grads[i] + weight_decay * params[i].value());
}

Var multi_head_attention(const std::vector<Var>& wq, const std::vector<Var>& wk,
                         const std::vector<Var>& wv, const std::vector<Var>& wo,
                         const Var& queries_in, const Var& keys_in, bool causal) {
  const Eigen::Index tq = queries_in.rows();
  const Eigen::Index tk = keys_in.rows();
  Matrix mask;
  if (causal) {
    if (tq != tk) throw std::invalid_argument("causal attention needs square mask");
    mask = Matrix::Zero(tq, tk);
    for (Eigen::Index i = 0; i < tq; ++i)
      for (Eigen::Index j = i + 1; j < tk; ++j) mask(i, j) = -1e9;
  }
  std::vector<Var> head_outputs;
  head_outputs.reserve(wq.size());
  for (std::size_t h = 0; h < wq.size(); ++h) {
    const double dh = static_cast<double>(wq[h].cols());
    Var q = ad::matmul(queries_in, wq[h]);
    Var k = ad::matmul(keys_in, wk[h]);
    Var v = ad::matmul(keys_in, wv[h]);
    Var logits = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(dh));
    if (causal) logits = ad::add(logits, ad::constant(mask));
    Var attn = ad::softmax_rows(logits);
    head_outputs.push_back(ad::matmul(ad::matmul(attn, v), wo[h]));
  }
  return ad::sum_list(head_outputs);
}

namespace {

void add_attention_params(ParamSet& ps, const std::string& prefix, int dim, int heads,
                          Rng& rng, std::vector<Var>& wq, std::vector<Var>& wk,
                          std::vector<Var>& wv, std::vector<Var>& wo) {
  if (dim % heads != 0)
    throw std::invalid_argument("attention: dim must be divisible by heads");
  const int dh = dim / heads;
  const double std_in = 1.0 / std::sqrt(static_cast<double>(dim));
  const double std_out = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h) {
    const std::string hp = prefix + ".h" + std::to_string(h);
    wq.push_back(ps.add_normal(hp + ".wq", dim, dh, rng, std_in));
    wk.push_back(ps.add_normal(hp + ".wk", dim, dh, rng, std_in));
    wv.push_back(ps.add_normal(hp + ".wv", dim, dh, rng, std_in));
    wo.push_back(ps.add_normal(hp + ".wo", dh, dim, rng, std_out));
  }
}

Var ffn_forward(const TransformerLayer& l, const Var& x) {
  Var h = ad::gelu(ad::add(ad::matmul(x, l.w1), ad::broadcast_rows(l.b1, x.rows())));
  return ad::add(ad::matmul(h, l.w2), ad::broadcast_rows(l.b2, x.rows()));
}

}  // namespace

Var apply_dropout(const Var& x, double rate, Rng* rng) {
  if (rate <= 0.0 || rng == nullptr) return x;
  const double keep = 1.0 - rate;
  Matrix mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      mask(i, j) = (rng->uniform() < keep) ? 1.0 / keep : 0.0;
  return ad::mul(x, ad::constant(std::move(mask)));
}

TransformerStack TransformerStack::create(ParamSet& ps, const std::string& prefix,
                                          int dim, int n_layers, int heads,
                                          int ffn_mult, Rng& rng) {
  TransformerStack s;
  s.dim = dim;
  s.heads = heads;
  const double std_in = 1.0 / std::sqrt(static_cast<double>(dim));
  const double std_hidden = 1.0 / std::sqrt(static_cast<double>(dim * ffn_mult));
  for (int l = 0; l < n_layers; ++l) {
    const std::string lp = prefix + ".l" + std::to_string(l);
    TransformerLayer layer;
    add_attention_params(ps, lp + ".attn", dim, heads, rng, layer.wq, layer.wk,
                         layer.wv, layer.wo);
    layer.ln1_g = ps.add_constant(lp + ".ln1.g", 1, dim, 1.0);
    layer.ln1_b = ps.add_constant(lp + ".ln1.b", 1, dim, 0.0);
    layer.ln2_g = ps.add_constant(lp + ".ln2.g", 1, dim, 1.0);
    layer.ln2_b = ps.add_constant(lp + ".ln2.b", 1, dim, 0.0);
    layer.w1 = ps.add_normal(lp + ".ffn.w1", dim, dim * ffn_mult, rng, std_in);
    layer.b1 = ps.add_constant(lp + ".ffn.b1", 1, dim * ffn_mult, 0.0);
    layer.w2 = ps.add_normal(lp + ".ffn.w2", dim * ffn_mult, dim, rng, std_hidden);
    layer.b2 = ps.add_constant(lp + ".ffn.b2", 1, dim, 0.0);
    s.layers.push_back(std::move(layer));
  }
  s.ln_f_g = ps.add_constant(prefix + ".lnf.g", 1, dim, 1.0);
  s.ln_f_b = ps.add_constant(prefix + ".lnf.b", 1, dim, 0.0);
  return s;
}

Var TransformerStack::forward(const Var& x_in, bool causal, double dropout,
                              Rng* dropout_rng) const {
  Var x = x_in;
  for (const auto& l : layers) {
    Var normed = ad::layer_norm_rows(x, l.ln1_g, l.ln1_b);
    Var attn = multi_head_attention(l.wq, l.wk, l.wv, l.wo, normed, normed, causal);
    x = ad::add(x, apply_dropout(attn, dropout, dropout_rng));
    Var normed2 = ad::layer_norm_rows(x, l.ln2_g, l.ln2_b);
    x = ad::add(x, apply_dropout(ffn_forward(l, normed2), dropout, dropout_rng));
  }
  return ad::layer_norm_rows(x, ln_f_g, ln_f_b);
}

TransformerDecoderStack TransformerDecoderStack::create(ParamSet& ps,
                                                        const std::string& prefix,
                                                        int dim, int n_layers,
                                                        int heads, int ffn_mult,
                                                        Rng& rng) {
  TransformerDecoderStack s;
  s.dim = dim;
  s.heads = heads;
  const double std_in = 1.0 / std::sqrt(static_cast<double>(dim));
  const double std_hidden = 1.0 / std::sqrt(static_cast<double>(dim * ffn_mult));
  for (int l = 0; l < n_layers; ++l) {
    const std::string lp = prefix + ".l" + std::to_string(l);
    TransformerDecoderLayer layer;
    add_attention_params(ps, lp + ".self", dim, heads, rng, layer.self_wq,
                         layer.self_wk, layer.self_wv, layer.self_wo);
    add_attention_params(ps, lp + ".cross", dim, heads, rng, layer.cross_wq,
                         layer.cross_wk, layer.cross_wv, layer.cross_wo);
    layer.ln1_g = ps.add_constant(lp + ".ln1.g", 1, dim, 1.0);
    layer.ln1_b = ps.add_constant(lp + ".ln1.b", 1, dim, 0.0);
    layer.ln2_g = ps.add_constant(lp + ".ln2.g", 1, dim, 1.0);
    layer.ln2_b = ps.add_constant(lp + ".ln2.b", 1, dim, 0.0);
    layer.ln3_g = ps.add_constant(lp + ".ln3.g", 1, dim, 1.0);
    layer.ln3_b = ps.add_constant(lp + ".ln3.b", 1, dim, 0.0);
    layer.w1 = ps.add_normal(lp + ".ffn.w1", dim, dim * ffn_mult, rng, std_in);
    layer.b1 = ps.add_constant(lp + ".ffn.b1", 1, dim * ffn_mult, 0.0);
    layer.w2 = ps.add_normal(lp + ".ffn.w2", dim * ffn_mult, dim, rng, std_hidden);
    layer.b2 = ps.add_constant(lp + ".ffn.b2", 1, dim, 0.0);
    s.layers.push_back(std::move(layer));
  }
  s.ln_f_g = ps.add_constant(prefix + ".lnf.g", 1, dim, 1.0);
  s.ln_f_b = ps.add_constant(prefix + ".lnf.b", 1, dim, 0.0);
  return s;
}

Var TransformerDecoderStack::forward(const Var& x_in, const Var& memory,
                                     double dropout, Rng* dropout_rng) const {
  Var x = x_in;
  for (const auto& l : layers) {
    Var normed = ad::layer_norm_rows(x, l.ln1_g, l.ln1_b);
    Var self_attn =
        multi_head_attention(l.self_wq, l.self_wk, l.self_wv, l.self_wo, normed,
                             normed, /*causal=*/true);
    x = ad::add(x, apply_dropout(self_attn, dropout, dropout_rng));
    Var normed2 = ad::layer_norm_rows(x, l.ln2_g, l.ln2_b);
    Var cross = multi_head_attention(l.cross_wq, l.cross_wk, l.cross_wv, l.cross_wo,
                                     normed2, memory, /*causal=*/false);
    x = ad::add(x, apply_dropout(cross, dropout, dropout_rng));
    Var normed3 = ad::layer_norm_rows(x, l.ln3_g, l.ln3_b);
    TransformerLayer ffn_view;
    ffn_view.w1 = l.w1;
    ffn_view.b1 = l.b1;
    ffn_view.w2 = l.w2;
    ffn_view.b2 = l.b2;
    x = ad::add(x, apply_dropout(ffn_forward(ffn_view, normed3), dropout, dropout_rng));
  }
  return ad::layer_norm_rows(x, ln_f_g, ln_f_b);
}

GruStack GruStack::create(ParamSet& ps, const std::string& prefix, int dim,
                          int n_layers, Rng& rng) {
  GruStack s;
  s.dim = dim;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(dim));
  for (int l = 0; l < n_layers; ++l) {
    const std::string lp = prefix + ".l" + std::to_string(l);
    GruLayer layer;
    layer.wr = ps.add_normal(lp + ".wr", dim, dim, rng, stddev);
    layer.wz = ps.add_normal(lp + ".wz", dim, dim, rng, stddev);
    layer.wn = ps.add_normal(lp + ".wn", dim, dim, rng, stddev);
    layer.ur = ps.add_normal(lp + ".ur", dim, dim, rng, stddev);
    layer.uz = ps.add_normal(lp + ".uz", dim, dim, rng, stddev);
    layer.un = ps.add_normal(lp + ".un", dim, dim, rng, stddev);
    layer.br = ps.add_constant(lp + ".br", 1, dim, 0.0);
    layer.bz = ps.add_constant(lp + ".bz", 1, dim, 0.0);
    layer.bn = ps.add_constant(lp + ".bn", 1, dim, 0.0);
    s.layers.push_back(std::move(layer));
  }
  return s;
}

Var GruStack::forward(const Var& x_in, double dropout, Rng* dropout_rng) const {
  Var seq = x_in;
  for (const auto& l : layers) {
    std::vector<Var> outputs;
    outputs.reserve(static_cast<std::size_t>(seq.rows()));
    Var h = ad::constant(Matrix::Zero(1, dim));
    for (Eigen::Index t = 0; t < seq.rows(); ++t) {
      Var xt = ad::slice_rows(seq, t, 1);
      Var r = ad::sigmoid(ad::add(ad::add(ad::matmul(xt, l.wr), ad::matmul(h, l.ur)), l.br));
      Var z = ad::sigmoid(ad::add(ad::add(ad::matmul(xt, l.wz), ad::matmul(h, l.uz)), l.bz));
      Var n = ad::tanh(ad::add(
          ad::add(ad::matmul(xt, l.wn), ad::mul(r, ad::matmul(h, l.un))), l.bn));
      Var one_minus_z = ad::add_scalar(ad::neg(z), 1.0);
      h = ad::add(ad::mul(one_minus_z, n), ad::mul(z, h));
      outputs.push_back(h);
    }
    seq = ad::concat_rows(outputs);
    seq = apply_dropout(seq, dropout, dropout_rng);
  }
  return seq;
}

void save_checkpoint(const std::string& path, const nlohmann::ordered_json& config_echo,
                     const ParamSet& params) {
  nlohmann::ordered_json j;
  j["config"] = config_echo;
  j["params"] = params.to_json();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out << j.dump(1) << "\n";
}

nlohmann::ordered_json load_checkpoint(const std::string& path, ParamSet& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("checkpoint not found: " + path);
  nlohmann::ordered_json j = nlohmann::ordered_json::parse(in);
  params.load_json(j.at("params"));
  return j.at("config");
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace dr4sr::nn
