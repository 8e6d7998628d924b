#include "dport/lm.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <utility>

#include "dport/errors.hpp"
#include "dport/util.hpp"
#include "tensor_io.hpp"

namespace dport {

namespace {

constexpr std::string_view kParamsMagic = "DPORTLM1";

void check_probability(double p, const char* name) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError(std::string(name) + " must lie in [0,1)");
  }
}

Eigen::ArrayXXd sigmoid(const Eigen::ArrayXXd& x) { return 1.0 / (1.0 + (-x).exp()); }

// Scales column block t of `m` (B columns each) by `mask` (rows x B).
void apply_time_constant_mask(Matrix& m, const Matrix& mask, std::size_t batch, std::size_t time) {
  const auto B = static_cast<Eigen::Index>(batch);
  for (std::size_t t = 0; t < time; ++t) {
    m.middleCols(static_cast<Eigen::Index>(t) * B, B).array() *= mask.array();
  }
}

Matrix bernoulli_mask(Eigen::Index rows, Eigen::Index cols, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return Matrix::Ones(rows, cols);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double keep = 1.0 / (1.0 - p);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = u(rng) < p ? 0.0 : keep;
  }
  return m;
}

}  // namespace

// -- config ------------------------------------------------------------------------

void LMConfig::validate() const {
  if (vocab_size <= Vocabulary::reserved_count) throw ConfigError("vocab_size too small");
  if (embed_dim == 0 || hidden_dim == 0) throw ConfigError("embed_dim and hidden_dim must be positive");
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (bptt_len < 1 || batch_size < 1) throw ConfigError("bptt_len and batch_size must be >= 1");
  check_probability(dropconnect_p, "dropconnect_p");
  check_probability(variational_input_p, "variational_input_p");
  check_probability(variational_hidden_p, "variational_hidden_p");
  check_probability(embedding_dropout_p, "embedding_dropout_p");
  if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
  if (!(grad_clip > 0.0)) throw ConfigError("grad_clip must be > 0");
  if (!(init_range > 0.0)) throw ConfigError("init_range must be > 0");
  if (tie_weights && output_dim() != embed_dim) {
    throw ConfigError("tie_weights requires the final layer width to equal embed_dim");
  }
}

bool LMConfig::any_dropout() const {
  return dropconnect_p > 0.0 || variational_input_p > 0.0 || variational_hidden_p > 0.0 ||
         embedding_dropout_p > 0.0;
}

std::size_t LMConfig::layer_hidden_dim(std::size_t l) const {
  if (tie_weights && l + 1 == n_layers) return embed_dim;
  return hidden_dim;
}

std::size_t LMConfig::layer_input_dim(std::size_t l) const {
  return l == 0 ? embed_dim : layer_hidden_dim(l - 1);
}

nlohmann::json LMConfig::to_json() const {
  return {{"vocab_size", vocab_size},
          {"embed_dim", embed_dim},
          {"hidden_dim", hidden_dim},
          {"n_layers", n_layers},
          {"bptt_len", bptt_len},
          {"batch_size", batch_size},
          {"dropconnect_p", dropconnect_p},
          {"variational_input_p", variational_input_p},
          {"variational_hidden_p", variational_hidden_p},
          {"embedding_dropout_p", embedding_dropout_p},
          {"tie_weights", tie_weights},
          {"lr", lr},
          {"grad_clip", grad_clip},
          {"epochs", epochs},
          {"init_range", init_range},
          {"seed", seed}};
}

LMConfig LMConfig::from_json(const nlohmann::json& j, const LMConfig& defaults) {
  LMConfig c = defaults;
  static const std::set<std::string> known{
      "vocab_size", "embed_dim", "hidden_dim", "n_layers", "bptt_len", "batch_size",
      "dropconnect_p", "variational_input_p", "variational_hidden_p", "embedding_dropout_p",
      "tie_weights", "lr", "grad_clip", "epochs", "init_range", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown language-model config key '" + key + "'");
  }
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.bptt_len = j.value("bptt_len", c.bptt_len);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.dropconnect_p = j.value("dropconnect_p", c.dropconnect_p);
  c.variational_input_p = j.value("variational_input_p", c.variational_input_p);
  c.variational_hidden_p = j.value("variational_hidden_p", c.variational_hidden_p);
  c.embedding_dropout_p = j.value("embedding_dropout_p", c.embedding_dropout_p);
  c.tie_weights = j.value("tie_weights", c.tie_weights);
  c.lr = j.value("lr", c.lr);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.epochs = j.value("epochs", c.epochs);
  c.init_range = j.value("init_range", c.init_range);
  c.seed = j.value("seed", c.seed);
  return c;
}

// -- params ------------------------------------------------------------------------

LMParams LMParams::zeros(const LMConfig& config) {
  config.validate();
  LMParams p;
  p.config = config;
  const auto V = static_cast<Eigen::Index>(config.vocab_size);
  const auto E = static_cast<Eigen::Index>(config.embed_dim);
  p.embedding = Matrix::Zero(V, E);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const auto H = static_cast<Eigen::Index>(config.layer_hidden_dim(l));
    const auto In = static_cast<Eigen::Index>(config.layer_input_dim(l));
    p.layers.push_back({Matrix::Zero(4 * H, In), Matrix::Zero(4 * H, H), Vector::Zero(4 * H)});
  }
  if (!config.tie_weights) {
    p.decoder = Matrix::Zero(V, static_cast<Eigen::Index>(config.output_dim()));
  }
  p.decoder_bias = Vector::Zero(V);
  return p;
}

LMParams LMParams::initialize(const LMConfig& config) {
  LMParams p = zeros(config);
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                    0x1a17u};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u(-config.init_range, config.init_range);
  auto fill = [&](Matrix& m) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
    }
  };
  fill(p.embedding);
  for (auto& layer : p.layers) {
    fill(layer.w_ih);
    fill(layer.w_hh);
  }
  if (!config.tie_weights) fill(p.decoder);
  return p;
}

std::vector<ParamRef> LMParams::tensors() {
  const std::size_t n = config.n_layers;
  auto span_of = [](auto& m) { return std::span<double>(m.data(), static_cast<std::size_t>(m.size())); };
  std::vector<ParamRef> out;
  out.push_back({"embedding", n + 1, span_of(embedding)});
  for (std::size_t l = 0; l < n; ++l) {
    const std::string prefix = "lstm" + std::to_string(l) + ".";
    out.push_back({prefix + "w_ih", n - l, span_of(layers[l].w_ih)});
    out.push_back({prefix + "w_hh", n - l, span_of(layers[l].w_hh)});
    out.push_back({prefix + "bias", n - l, span_of(layers[l].bias)});
  }
  if (!config.tie_weights) out.push_back({"decoder", 0, span_of(decoder)});
  out.push_back({"decoder_bias", 0, span_of(decoder_bias)});
  return out;
}

std::vector<ConstParamRef> LMParams::tensors() const {
  std::vector<ConstParamRef> out;
  for (auto& t : const_cast<LMParams*>(this)->tensors()) {
    out.push_back({t.name, t.group, std::span<const double>(t.values.data(), t.values.size())});
  }
  return out;
}

bool LMParams::all_finite() const {
  for (const auto& t : tensors()) {
    for (double v : t.values) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

bool bitwise_equal(const LMParams& a, const LMParams& b) {
  auto ta = a.tensors();
  auto tb = b.tensors();
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].values.size() != tb[i].values.size()) return false;
    if (std::memcmp(ta[i].values.data(), tb[i].values.data(), ta[i].values.size_bytes()) != 0) {
      return false;
    }
  }
  return true;
}

void LMParams::save(const std::filesystem::path& bin_path) const {
  detail::write_tensor_file(bin_path, kParamsMagic, {{"config", config.to_json()}}, tensors());
}

LMParams LMParams::load(const std::filesystem::path& bin_path) {
  std::ifstream in;
  const auto meta = detail::read_tensor_header(in, bin_path, kParamsMagic);
  LMParams p = zeros(LMConfig::from_json(meta.at("config")));
  detail::read_tensors(in, p.tensors());
  return p;
}

namespace detail {

namespace {

void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw ValidationError("truncated parameter file");
  return v;
}

}  // namespace

void write_tensor_file(const std::filesystem::path& path, std::string_view magic,
                       const nlohmann::json& meta, const std::vector<ConstParamRef>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
  const std::string m = meta.dump();
  write_u64(out, m.size());
  out.write(m.data(), static_cast<std::streamsize>(m.size()));
  write_u64(out, tensors.size());
  for (const auto& t : tensors) {
    write_u64(out, t.name.size());
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    write_u64(out, t.values.size());
    out.write(reinterpret_cast<const char*>(t.values.data()),
              static_cast<std::streamsize>(t.values.size_bytes()));
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

nlohmann::json read_tensor_header(std::ifstream& in, const std::filesystem::path& path,
                                  std::string_view magic) {
  in.open(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string got(magic.size(), '\0');
  in.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (!in || got != magic) throw ValidationError(path.string() + " has the wrong file type");
  std::string meta(read_u64(in), '\0');
  in.read(meta.data(), static_cast<std::streamsize>(meta.size()));
  return nlohmann::json::parse(meta);
}

void read_tensors(std::istream& in, const std::vector<ParamRef>& tensors) {
  if (read_u64(in) != tensors.size()) throw ValidationError("tensor count mismatch");
  for (const auto& t : tensors) {
    std::string name(read_u64(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    if (name != t.name || read_u64(in) != t.values.size()) {
      throw ValidationError("tensor layout mismatch at " + t.name);
    }
    in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(t.values.size_bytes()));
    if (!in) throw ValidationError("truncated parameter file");
  }
}

}  // namespace detail

LMState LMState::zeros(const LMConfig& config, std::size_t batch) {
  LMState s;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const auto H = static_cast<Eigen::Index>(config.layer_hidden_dim(l));
    s.h.push_back(Matrix::Zero(H, static_cast<Eigen::Index>(batch)));
    s.c.push_back(Matrix::Zero(H, static_cast<Eigen::Index>(batch)));
  }
  return s;
}

// -- masks -------------------------------------------------------------------------

RegMasks sample_masks(const LMConfig& config, std::size_t batch, std::mt19937_64& rng) {
  RegMasks m;
  const auto B = static_cast<Eigen::Index>(batch);
  m.embedding_rows = bernoulli_mask(static_cast<Eigen::Index>(config.vocab_size), 1,
                                    config.embedding_dropout_p, rng);
  m.input = bernoulli_mask(static_cast<Eigen::Index>(config.embed_dim), B, config.variational_input_p, rng);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const auto H = static_cast<Eigen::Index>(config.layer_hidden_dim(l));
    m.hidden.push_back(bernoulli_mask(H, B, config.variational_hidden_p, rng));
    m.dropconnect.push_back(bernoulli_mask(4 * H, H, config.dropconnect_p, rng));
  }
  return m;
}

// -- encoder -----------------------------------------------------------------------

EncoderTrace encoder_forward(const LMParams& params, const TokenMatrix& ids, const LMState& state,
                             const RegMasks* masks, LMState* final_state) {
  const auto& cfg = params.config;
  const std::size_t B = static_cast<std::size_t>(ids.rows());
  const std::size_t T = static_cast<std::size_t>(ids.cols());
  const auto Bi = static_cast<Eigen::Index>(B);
  const auto TB = static_cast<Eigen::Index>(B * T);
  if (state.h.size() != cfg.n_layers || state.batch() != B) {
    throw DomainError("state shape does not match the batch");
  }

  EncoderTrace tr;
  tr.ids = ids;
  tr.batch = B;
  tr.time = T;
  tr.masks = masks;
  tr.layers.resize(cfg.n_layers);

  const bool emb_drop = masks && masks->embedding_rows.size() > 0;
  Matrix x(static_cast<Eigen::Index>(cfg.embed_dim), TB);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t b = 0; b < B; ++b) {
      const int id = ids(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(t));
      if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
        throw DomainError("token id " + std::to_string(id) + " outside vocabulary");
      }
      auto col = x.col(static_cast<Eigen::Index>(t * B + b));
      col = params.embedding.row(id).transpose();
      if (emb_drop) col *= masks->embedding_rows(id);
    }
  }
  if (masks && masks->input.size() > 0) apply_time_constant_mask(x, masks->input, B, T);

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    auto& L = tr.layers[l];
    const auto& P = params.layers[l];
    const auto H = static_cast<Eigen::Index>(cfg.layer_hidden_dim(l));
    L.input = std::move(x);
    L.w_hh_eff = (masks && !masks->dropconnect.empty()) ? Matrix(P.w_hh.cwiseProduct(masks->dropconnect[l]))
                                                        : P.w_hh;
    Matrix pre = P.w_ih * L.input;
    pre.colwise() += P.bias;

    L.gates.resize(4 * H, TB);
    L.cells.resize(H, TB + Bi);
    L.hiddens.resize(H, TB + Bi);
    L.tanh_c.resize(H, TB);
    L.cells.leftCols(Bi) = state.c[l];
    L.hiddens.leftCols(Bi) = state.h[l];

    Matrix z(4 * H, Bi);
    for (std::size_t t = 0; t < T; ++t) {
      const auto c0 = static_cast<Eigen::Index>(t) * Bi;
      z = pre.middleCols(c0, Bi);
      z.noalias() += L.w_hh_eff * L.hiddens.middleCols(c0, Bi);
      auto g = L.gates.middleCols(c0, Bi);
      g.topRows(H) = sigmoid(z.topRows(H).array()).matrix();
      g.middleRows(H, H) = sigmoid(z.middleRows(H, H).array()).matrix();
      g.middleRows(2 * H, H) = z.middleRows(2 * H, H).array().tanh().matrix();
      g.bottomRows(H) = sigmoid(z.bottomRows(H).array()).matrix();
      L.cells.middleCols(c0 + Bi, Bi) =
          (g.middleRows(H, H).array() * L.cells.middleCols(c0, Bi).array() +
           g.topRows(H).array() * g.middleRows(2 * H, H).array())
              .matrix();
      L.tanh_c.middleCols(c0, Bi) = L.cells.middleCols(c0 + Bi, Bi).array().tanh().matrix();
      L.hiddens.middleCols(c0 + Bi, Bi) =
          (g.bottomRows(H).array() * L.tanh_c.middleCols(c0, Bi).array()).matrix();
    }
    x = L.hiddens.rightCols(TB);
    if (masks && !masks->hidden.empty()) apply_time_constant_mask(x, masks->hidden[l], B, T);
  }
  tr.output = std::move(x);

  if (final_state) {
    final_state->h.resize(cfg.n_layers);
    final_state->c.resize(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      final_state->h[l] = tr.layers[l].hiddens.rightCols(Bi);
      final_state->c[l] = tr.layers[l].cells.rightCols(Bi);
    }
  }
  return tr;
}

void encoder_backward(const LMParams& params, const EncoderTrace& tr, const Matrix& d_output,
                      LMParams& grad, std::size_t lowest_layer, bool embedding_grad) {
  const auto& cfg = params.config;
  const RegMasks* masks = tr.masks;
  const std::size_t B = tr.batch;
  const std::size_t T = tr.time;
  const auto Bi = static_cast<Eigen::Index>(B);
  const auto TB = static_cast<Eigen::Index>(B * T);
  if (T == 0) return;

  Matrix d = d_output;
  for (std::size_t li = cfg.n_layers; li-- > lowest_layer;) {
    const auto& L = tr.layers[li];
    const auto& P = params.layers[li];
    auto& G = grad.layers[li];
    const auto H = static_cast<Eigen::Index>(cfg.layer_hidden_dim(li));
    if (masks && !masks->hidden.empty()) apply_time_constant_mask(d, masks->hidden[li], B, T);

    Matrix dZ(4 * H, TB);
    Matrix dh_next = Matrix::Zero(H, Bi);
    Matrix dc_next = Matrix::Zero(H, Bi);
    for (std::size_t t = T; t-- > 0;) {
      const auto c0 = static_cast<Eigen::Index>(t) * Bi;
      const auto g = L.gates.middleCols(c0, Bi);
      const auto i = g.topRows(H).array();
      const auto f = g.middleRows(H, H).array();
      const auto gg = g.middleRows(2 * H, H).array();
      const auto o = g.bottomRows(H).array();
      const auto tc = L.tanh_c.middleCols(c0, Bi).array();
      const auto c_prev = L.cells.middleCols(c0, Bi).array();

      const Eigen::ArrayXXd dh = d.middleCols(c0, Bi).array() + dh_next.array();
      const Eigen::ArrayXXd dc = dc_next.array() + dh * o * (1.0 - tc.square());
      auto dz = dZ.middleCols(c0, Bi);
      dz.topRows(H) = (dc * gg * i * (1.0 - i)).matrix();
      dz.middleRows(H, H) = (dc * c_prev * f * (1.0 - f)).matrix();
      dz.middleRows(2 * H, H) = (dc * i * (1.0 - gg.square())).matrix();
      dz.bottomRows(H) = (dh * tc * o * (1.0 - o)).matrix();
      dh_next.noalias() = L.w_hh_eff.transpose() * dz;
      dc_next = (dc * f).matrix();
    }

    Matrix d_whh = dZ * L.hiddens.leftCols(TB).transpose();
    if (masks && !masks->dropconnect.empty()) d_whh.array() *= masks->dropconnect[li].array();
    G.w_hh += d_whh;
    G.w_ih.noalias() += dZ * L.input.transpose();
    G.bias += dZ.rowwise().sum();

    const bool need_input_grad = li > lowest_layer || (li == 0 && embedding_grad);
    if (!need_input_grad) return;
    d = P.w_ih.transpose() * dZ;
  }

  if (lowest_layer != 0 || !embedding_grad) return;
  if (masks && masks->input.size() > 0) apply_time_constant_mask(d, masks->input, B, T);
  const bool emb_drop = masks && masks->embedding_rows.size() > 0;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t b = 0; b < B; ++b) {
      const int id = tr.ids(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(t));
      const double scale = emb_drop ? masks->embedding_rows(id) : 1.0;
      if (scale == 0.0) continue;
      grad.embedding.row(id) += scale * d.col(static_cast<Eigen::Index>(t * B + b)).transpose();
    }
  }
}

// -- language model ------------------------------------------------------------------

LMOutput lm_forward(const TokenMatrix& ids, const LMState& state, const LMParams& params,
                    const RegMasks* masks, Mode mode) {
  LMOutput out;
  out.batch = static_cast<std::size_t>(ids.rows());
  out.time = static_cast<std::size_t>(ids.cols());
  const EncoderTrace tr =
      encoder_forward(params, ids, state, mode == Mode::train ? masks : nullptr, &out.state);
  out.logits = params.output_weights() * tr.output;
  out.logits.colwise() += params.decoder_bias;
  return out;
}

namespace {

// Column-wise log-softmax cross entropy. Fills `d_logits` (if non-null) with the
// gradient of the mean loss. Returns (sum of losses, count).
std::pair<double, std::size_t> softmax_xent(const Matrix& logits, const TokenMatrix& targets,
                                            std::size_t batch, Matrix* d_logits) {
  const std::size_t T = static_cast<std::size_t>(targets.cols());
  if (static_cast<std::size_t>(targets.rows()) != batch ||
      static_cast<Eigen::Index>(batch * T) != logits.cols()) {
    throw DomainError("targets shape does not match logits");
  }
  double total = 0.0;
  std::size_t count = 0;
  if (d_logits) d_logits->setZero(logits.rows(), logits.cols());
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t b = 0; b < batch; ++b) {
      const int y = targets(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(t));
      if (y == Vocabulary::pad_id) continue;
      if (y < 0 || y >= logits.rows()) throw DomainError("target id outside vocabulary");
      const auto col = static_cast<Eigen::Index>(t * batch + b);
      const auto z = logits.col(col);
      const double m = z.maxCoeff();
      const double lse = m + std::log((z.array() - m).exp().sum());
      total += lse - z(y);
      ++count;
      if (d_logits) {
        d_logits->col(col) = (z.array() - lse).exp().matrix();
        (*d_logits)(y, col) -= 1.0;
      }
    }
  }
  if (count == 0) throw DomainError("every target position is padding");
  if (d_logits) *d_logits /= static_cast<double>(count);
  return {total, count};
}

}  // namespace

double lm_loss(const LMOutput& out, const TokenMatrix& targets) {
  auto [total, count] = softmax_xent(out.logits, targets, out.batch, nullptr);
  return total / static_cast<double>(count);
}

LMGradient lm_loss_and_grad(const LMParams& params, const TokenMatrix& ids,
                            const TokenMatrix& targets, const LMState& state,
                            const RegMasks* masks) {
  LMGradient g;
  g.grad = params.zeros_like();
  const EncoderTrace tr = encoder_forward(params, ids, state, masks, &g.state);
  Matrix logits = params.output_weights() * tr.output;
  logits.colwise() += params.decoder_bias;

  Matrix d_logits;
  auto [total, count] = softmax_xent(logits, targets, static_cast<std::size_t>(ids.rows()), &d_logits);
  g.loss = total / static_cast<double>(count);
  g.count = count;

  g.grad.decoder_bias = d_logits.rowwise().sum();
  if (params.config.tie_weights) {
    g.grad.embedding.noalias() += d_logits * tr.output.transpose();
  } else {
    g.grad.decoder.noalias() = d_logits * tr.output.transpose();
  }
  const Matrix d_output = params.output_weights().transpose() * d_logits;
  encoder_backward(params, tr, d_output, g.grad);
  return g;
}

// -- batching ------------------------------------------------------------------------

BpttBatches::BpttBatches(std::span<const int> stream, std::size_t batch, std::size_t bptt_len)
    : stream_(stream.begin(), stream.end()), batch_(batch), bptt_(bptt_len) {
  if (batch == 0 || bptt_len == 0) throw DomainError("batch and bptt_len must be positive");
  if (stream.size() <= batch) {
    throw DomainError("stream of " + std::to_string(stream.size()) + " ids is too short for batch " +
                      std::to_string(batch));
  }
  row_len_ = (stream.size() - 1) / batch;
  n_segments_ = (row_len_ + bptt_ - 1) / bptt_;
}

BpttBatches::Segment BpttBatches::operator[](std::size_t k) const {
  if (k >= n_segments_) throw DomainError("segment index out of range");
  const std::size_t start = k * bptt_;
  const std::size_t len = std::min(bptt_, row_len_ - start);
  Segment s;
  s.input.resize(static_cast<Eigen::Index>(batch_), static_cast<Eigen::Index>(len));
  s.target.resize(static_cast<Eigen::Index>(batch_), static_cast<Eigen::Index>(len));
  for (std::size_t b = 0; b < batch_; ++b) {
    const std::size_t base = b * row_len_ + start;
    for (std::size_t t = 0; t < len; ++t) {
      s.input(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(t)) = stream_[base + t];
      s.target(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(t)) = stream_[base + t + 1];
    }
  }
  return s;
}

BpttBatches bptt_batches(std::span<const int> stream, std::size_t batch, std::size_t bptt_len) {
  return BpttBatches(stream, batch, bptt_len);
}

std::string perplexity_trace_csv(std::span<const PerplexityPoint> trace) {
  std::ostringstream out;
  out << "epoch,train_ppl,valid_ppl\n";
  for (const auto& p : trace) {
    out << p.epoch << ',' << format_double(p.train_ppl) << ',';
    if (p.valid_ppl) out << format_double(*p.valid_ppl);
    out << '\n';
  }
  return out.str();
}

// -- optimisation ----------------------------------------------------------------------

double clip_global_norm(std::vector<ParamRef>& grads, const std::vector<bool>& trainable_groups,
                        double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    if (!trainable_groups.at(g.group)) continue;
    for (double v : g.values) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / (norm + 1e-12);
    for (auto& g : grads) {
      if (!trainable_groups.at(g.group)) continue;
      for (double& v : g.values) v *= scale;
    }
  }
  return norm;
}

void SgdOptimizer::step(const std::vector<ParamRef>& params, const std::vector<ConstParamRef>& grads,
                        std::span<const double> group_lrs, const std::vector<bool>& trainable_groups) {
  if (params.size() != grads.size()) throw DomainError("parameter and gradient lists differ");
  if (momentum_ > 0.0 && velocity_.empty()) {
    velocity_.resize(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) velocity_[k].assign(params[k].values.size(), 0.0);
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto group = params[k].group;
    if (!trainable_groups.at(group)) continue;
    const double lr = group_lrs[group];
    auto p = params[k].values;
    auto g = grads[k].values;
    if (momentum_ > 0.0) {
      auto& v = velocity_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = momentum_ * v[i] + g[i];
        p[i] -= lr * v[i];
      }
    } else {
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
    }
  }
}

void AdamOptimizer::step(const std::vector<ParamRef>& params, const std::vector<ConstParamRef>& grads,
                         std::span<const double> group_lrs, const std::vector<bool>& trainable_groups) {
  if (params.size() != grads.size()) throw DomainError("parameter and gradient lists differ");
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    t_.assign(params.size(), 0);
    for (std::size_t k = 0; k < params.size(); ++k) {
      m_[k].assign(params[k].values.size(), 0.0);
      v_[k].assign(params[k].values.size(), 0.0);
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto group = params[k].group;
    if (!trainable_groups.at(group)) continue;
    const double lr = group_lrs[group];
    const double t = static_cast<double>(++t_[k]);
    const double c1 = 1.0 - std::pow(beta1_, t);
    const double c2 = 1.0 - std::pow(beta2_, t);
    auto p = params[k].values;
    auto g = grads[k].values;
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

// -- training ------------------------------------------------------------------------

double stream_perplexity(const LMParams& params, std::span<const int> stream,
                         std::size_t batch_size, std::size_t bptt_len) {
  const BpttBatches batches(stream, batch_size, bptt_len);
  LMState state = LMState::zeros(params.config, batch_size);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < batches.size(); ++k) {
    const auto seg = batches[k];
    LMOutput out = lm_forward(seg.input, state, params, nullptr, Mode::eval);
    auto [sum, n] = softmax_xent(out.logits, seg.target, batch_size, nullptr);
    total += sum;
    count += n;
    state = std::move(out.state);
  }
  return std::exp(total / static_cast<double>(count));
}

double perplexity(const LMParams& params, const Vocabulary& vocab, const TextSource& source,
                  std::size_t batch_size) {
  if (source.document_count() == 0) throw DomainError("perplexity of an empty corpus");
  if (vocab.size() != params.config.vocab_size) {
    throw ValidationError("vocabulary size does not match the model");
  }
  const auto stream = encode_stream(source, vocab);
  if (stream.size() <= batch_size) batch_size = 1;
  return stream_perplexity(params, stream, batch_size, params.config.bptt_len);
}

LMTrainResult train_lm_from(const LMParams& initial, const TextSource& train,
                            const Vocabulary& vocab, const LMConfig& config,
                            const TextSource* valid) {
  config.validate();
  const auto& arch = initial.config;
  if (arch.vocab_size != config.vocab_size || arch.embed_dim != config.embed_dim ||
      arch.hidden_dim != config.hidden_dim || arch.n_layers != config.n_layers ||
      arch.tie_weights != config.tie_weights) {
    throw ConfigError("training config architecture differs from the initial parameters");
  }
  if (vocab.size() != config.vocab_size) {
    throw ValidationError("vocabulary has " + std::to_string(vocab.size()) + " entries but the model expects " +
                          std::to_string(config.vocab_size));
  }
  if (train.document_count() == 0) throw DomainError("training corpus is empty");

  LMTrainResult result;
  result.params = initial;
  result.params.config = config;
  LMParams& params = result.params;

  const auto stream = encode_stream(train, vocab);
  const BpttBatches batches(stream, config.batch_size, config.bptt_len);
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                    0x7a11u};
  std::mt19937_64 rng(seq);
  SgdOptimizer sgd;
  const std::vector<bool> all(params.group_count(), true);
  const std::vector<double> lrs(params.group_count(), config.lr);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    LMState state = LMState::zeros(config, config.batch_size);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < batches.size(); ++k) {
      const auto seg = batches[k];
      RegMasks masks;
      const bool dropout = config.any_dropout();
      if (dropout) masks = sample_masks(config, config.batch_size, rng);
      LMGradient g = lm_loss_and_grad(params, seg.input, seg.target, state, dropout ? &masks : nullptr);
      if (!std::isfinite(g.loss)) {
        throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch + 1) + ", segment " +
                               std::to_string(k) + "; lower lr or grad_clip");
      }
      state = std::move(g.state);
      auto grads = g.grad.tensors();
      clip_global_norm(grads, all, config.grad_clip);
      sgd.step(params.tensors(), std::as_const(g.grad).tensors(), lrs, all);
      total += g.loss * static_cast<double>(g.count);
      count += g.count;
    }
    PerplexityPoint point;
    point.epoch = epoch + 1;
    point.train_ppl = std::exp(total / static_cast<double>(count));
    if (valid) point.valid_ppl = perplexity(params, vocab, *valid, config.batch_size);
    result.trace.push_back(point);
  }
  return result;
}

LMTrainResult train_lm(const TextSource& train, const Vocabulary& vocab, const LMConfig& config,
                       const TextSource* valid) {
  LMConfig c = config;
  c.vocab_size = vocab.size();
  return train_lm_from(LMParams::initialize(c), train, vocab, c, valid);
}

}  // namespace dport
