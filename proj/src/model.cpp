#include "jtnmt/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace jtnmt::model {

using numerics::Graph;
using numerics::Var;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

void ModelConfig::validate() const {
  if (src_vocab <= data::kNumReserved || tgt_vocab <= data::kNumReserved) {
    throw std::invalid_argument("vocab sizes must exceed the reserved entries");
  }
  if (d_emb <= 0 || d_hidden <= 0 || d_att <= 0 || max_len <= 0) {
    throw std::invalid_argument("model dimensions and max_len must be positive");
  }
}

namespace {

void for_each_gru(GruParams& g, auto&& fn) {
  fn(g.wx);
  fn(g.bx);
  fn(g.u_gates);
  fn(g.u_cand);
}

GruParams make_gru(const std::string& prefix, int in, int hidden) {
  GruParams g;
  g.wx = Parameter(prefix + ".wx", Tensor::Zero(in, 3 * hidden));
  g.bx = Parameter(prefix + ".bx", Tensor::Zero(1, 3 * hidden));
  g.u_gates = Parameter(prefix + ".u_gates", Tensor::Zero(hidden, 2 * hidden));
  g.u_cand = Parameter(prefix + ".u_cand", Tensor::Zero(hidden, hidden));
  return g;
}

bool is_bias(const Parameter& p) {
  return p.name.ends_with(".bx") || p.name == "init_b" || p.name == "att_b" || p.name == "out_b";
}

Tensor gru_step(const GruParams& p, const Tensor& x, const Tensor& h) {
  const Eigen::Index hidden = h.cols();
  Tensor gx = x * p.wx.value;
  gx.rowwise() += p.bx.value.row(0);
  const Tensor ru = numerics::sigmoid(gx.leftCols(2 * hidden) + h * p.u_gates.value);
  const Tensor rh = ru.leftCols(hidden).cwiseProduct(h);
  const Tensor cand = numerics::tanh(gx.rightCols(hidden) + rh * p.u_cand.value);
  return h + ru.rightCols(hidden).cwiseProduct(cand - h);
}

// `gx` is the input projection x Wx + bx, computed by the caller.
Var gru_from_projection(Graph& g, const Var (&p)[4], Var gx, Var h, Eigen::Index hidden) {
  const Var ru = g.sigmoid(g.add(g.slice(gx, 1, 0, 2 * hidden), g.matmul(h, p[2])));
  const Var r = g.slice(ru, 1, 0, hidden);
  const Var u = g.slice(ru, 1, hidden, hidden);
  const Var cand =
      g.tanh(g.add(g.slice(gx, 1, 2 * hidden, hidden), g.matmul(g.mul(r, h), p[3])));
  return g.add(h, g.mul(u, g.sub(cand, h)));
}

void check_ids(std::span<const int> ids, int vocab, const char* what) {
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw std::out_of_range(std::string(what) + " id " + std::to_string(id) +
                              " outside vocabulary of " + std::to_string(vocab) +
                              " (map unknown tokens to <unk> first)");
    }
  }
}

void check_target(const ModelConfig& config, std::span<const int> ids) {
  if (ids.empty()) throw std::invalid_argument("target sequence is empty");
  if (ids.back() != data::kEos) throw std::invalid_argument("target must end with EOS");
  check_ids(ids, config.tgt_vocab, "target");
}

}  // namespace

std::vector<Parameter*> ModelParams::all() {
  std::vector<Parameter*> out = {&src_emb, &tgt_emb};
  for_each_gru(enc_fwd, [&](Parameter& p) { out.push_back(&p); });
  for_each_gru(enc_bwd, [&](Parameter& p) { out.push_back(&p); });
  for (Parameter* p : {&init_w, &init_b, &att_w, &att_u, &att_b, &att_v}) out.push_back(p);
  for_each_gru(dec, [&](Parameter& p) { out.push_back(&p); });
  out.push_back(&out_w);
  out.push_back(&out_b);
  return out;
}

std::vector<const Parameter*> ModelParams::all() const {
  auto mut = const_cast<ModelParams*>(this)->all();
  return {mut.begin(), mut.end()};
}

void ModelParams::zero_grad() {
  for (Parameter* p : all()) p->zero_grad();
}

std::size_t ModelParams::num_values() const {
  std::size_t n = 0;
  for (const Parameter* p : all()) n += static_cast<std::size_t>(p->value.size());
  return n;
}

ModelParams zero_params(const ModelConfig& config) {
  config.validate();
  const int e = config.d_emb;
  const int h = config.d_hidden;
  const int a = config.d_att;
  ModelParams m;
  m.config = config;
  m.src_emb = Parameter("src_emb", Tensor::Zero(config.src_vocab, e));
  m.tgt_emb = Parameter("tgt_emb", Tensor::Zero(config.tgt_vocab, e));
  m.enc_fwd = make_gru("enc_fwd", e, h);
  m.enc_bwd = make_gru("enc_bwd", e, h);
  m.init_w = Parameter("init_w", Tensor::Zero(h, h));
  m.init_b = Parameter("init_b", Tensor::Zero(1, h));
  m.att_w = Parameter("att_w", Tensor::Zero(h, a));
  m.att_u = Parameter("att_u", Tensor::Zero(2 * h, a));
  m.att_b = Parameter("att_b", Tensor::Zero(1, a));
  m.att_v = Parameter("att_v", Tensor::Zero(a, 1));
  m.dec = make_gru("dec", e + 2 * h, h);
  m.out_w = Parameter("out_w", Tensor::Zero(h + 2 * h + e, config.tgt_vocab));
  m.out_b = Parameter("out_b", Tensor::Zero(1, config.tgt_vocab));
  return m;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams m = zero_params(config);
  m.seed = seed;
  m.lineage.push_back("init:" + std::to_string(seed));
  std::mt19937_64 rng(seed);
  for (Parameter* p : m.all()) {
    if (is_bias(*p)) continue;
    const double variance = 6.0 / static_cast<double>(p->value.rows() + p->value.cols());
    std::normal_distribution<double> dist(0.0, std::sqrt(variance));
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = dist(rng);
  }
  return m;
}

// ---- inference ----------------------------------------------------------------

void check_source(const ModelConfig& config, std::span<const int> ids) {
  if (ids.empty()) throw std::invalid_argument("source sequence is empty");
  if (ids.size() > static_cast<std::size_t>(config.max_len)) {
    throw std::invalid_argument("source length " + std::to_string(ids.size()) +
                                " exceeds max_len " + std::to_string(config.max_len));
  }
  check_ids(ids, config.src_vocab, "source");
}

EncodedSource encode(const ModelParams& params, std::span<const int> source_ids) {
  check_source(params.config, source_ids);
  const auto len = static_cast<Eigen::Index>(source_ids.size());
  const Eigen::Index hidden = params.config.d_hidden;
  Tensor emb(len, params.config.d_emb);
  for (Eigen::Index t = 0; t < len; ++t) {
    emb.row(t) = params.src_emb.value.row(source_ids[static_cast<std::size_t>(t)]);
  }
  EncodedSource enc;
  enc.annotations.resize(len, 2 * hidden);
  Tensor h = Tensor::Zero(1, hidden);
  for (Eigen::Index t = 0; t < len; ++t) {
    h = gru_step(params.enc_fwd, emb.row(t), h);
    enc.annotations.row(t).head(hidden) = h.row(0);
  }
  h.setZero();
  for (Eigen::Index t = len - 1; t >= 0; --t) {
    h = gru_step(params.enc_bwd, emb.row(t), h);
    enc.annotations.row(t).tail(hidden) = h.row(0);
  }
  enc.keys = enc.annotations * params.att_u.value;
  Tensor z = enc.annotations.row(0).tail(hidden) * params.init_w.value + params.init_b.value;
  enc.initial_state = numerics::tanh(z);
  return enc;
}

Tensor attention_weights(const ModelParams& params, const Tensor& states,
                         const EncodedSource& enc) {
  Tensor query = states * params.att_w.value;
  query.rowwise() += params.att_b.value.row(0);
  Tensor scores(states.rows(), enc.keys.rows());
  for (Eigen::Index k = 0; k < states.rows(); ++k) {
    Tensor hidden = enc.keys;
    hidden.rowwise() += query.row(k);
    scores.row(k) = (numerics::tanh(hidden) * params.att_v.value).transpose();
  }
  return numerics::softmax(scores, 1);
}

StepOutput decode_step(const ModelParams& params, const Tensor& states,
                       std::span<const int> prev_tokens, const EncodedSource& enc) {
  const ModelConfig& c = params.config;
  if (states.cols() != c.d_hidden) {
    throw std::invalid_argument("decoder state width " + std::to_string(states.cols()) +
                                " != d_hidden " + std::to_string(c.d_hidden));
  }
  if (static_cast<Eigen::Index>(prev_tokens.size()) != states.rows()) {
    throw std::invalid_argument("decode_step: one previous token per state required");
  }
  check_ids(prev_tokens, c.tgt_vocab, "previous target");
  const Eigen::Index k = states.rows();
  const Tensor alpha = attention_weights(params, states, enc);

  StepOutput out;
  out.context = alpha * enc.annotations;
  Tensor emb(k, c.d_emb);
  for (Eigen::Index j = 0; j < k; ++j) {
    emb.row(j) = params.tgt_emb.value.row(prev_tokens[static_cast<std::size_t>(j)]);
  }
  Tensor x(k, c.d_emb + 2 * c.d_hidden);
  x << emb, out.context;
  out.state = gru_step(params.dec, x, states);
  Tensor readout(k, 3 * c.d_hidden + c.d_emb);
  readout << out.state, out.context, emb;
  Tensor logits = readout * params.out_w.value;
  logits.rowwise() += params.out_b.value.row(0);
  out.log_probs = numerics::log_softmax(logits, 1);
  return out;
}

std::vector<double> stepwise_log_probs(const ModelParams& params, std::span<const int> source_ids,
                                       std::span<const int> target_ids) {
  check_target(params.config, target_ids);
  const EncodedSource enc = encode(params, source_ids);
  Tensor state = enc.initial_state;
  int prev = data::kBos;
  std::vector<double> out;
  out.reserve(target_ids.size());
  for (int y : target_ids) {
    const int prev_arr[] = {prev};
    StepOutput step = decode_step(params, state, prev_arr, enc);
    out.push_back(step.log_probs(0, y));
    state = std::move(step.state);
    prev = y;
  }
  return out;
}

double sequence_log_prob(const ModelParams& params, std::span<const int> source_ids,
                         std::span<const int> target_ids) {
  double total = 0.0;
  for (double lp : stepwise_log_probs(params, source_ids, target_ids)) total += lp;
  return total;
}

// ---- graph path ---------------------------------------------------------------

ParamVars::ParamVars(Graph& g, ModelParams& p) {
  src_emb = g.parameter(p.src_emb);
  tgt_emb = g.parameter(p.tgt_emb);
  auto gru = [&](GruParams& src, Var (&dst)[4]) {
    dst[0] = g.parameter(src.wx);
    dst[1] = g.parameter(src.bx);
    dst[2] = g.parameter(src.u_gates);
    dst[3] = g.parameter(src.u_cand);
  };
  gru(p.enc_fwd, enc_fwd);
  gru(p.enc_bwd, enc_bwd);
  init_w = g.parameter(p.init_w);
  init_b = g.parameter(p.init_b);
  att_w = g.parameter(p.att_w);
  att_u = g.parameter(p.att_u);
  att_b = g.parameter(p.att_b);
  att_v = g.parameter(p.att_v);
  gru(p.dec, dec);
  out_w = g.parameter(p.out_w);
  out_b = g.parameter(p.out_b);
}

Var batch_log_probs(Graph& g, const ParamVars& pv, const ModelConfig& config,
                    std::span<const data::TokenIds* const> sources,
                    std::span<const data::TokenIds* const> targets) {
  if (sources.empty() || sources.size() != targets.size()) {
    throw std::invalid_argument("batch_log_probs: need equally many (>0) sources and targets");
  }
  const std::size_t batch = sources.size();
  const auto rows = static_cast<Eigen::Index>(batch);
  const Eigen::Index hidden = config.d_hidden;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    check_source(config, *sources[b]);
    check_target(config, *targets[b]);
    src_len = std::max(src_len, sources[b]->size());
    tgt_len = std::max(tgt_len, targets[b]->size());
  }

  auto column = [&](std::span<const data::TokenIds* const> seqs, std::size_t t) {
    std::vector<int> ids(batch, data::kPad);
    for (std::size_t b = 0; b < batch; ++b) {
      if (t < seqs[b]->size()) ids[b] = (*seqs[b])[t];
    }
    return ids;
  };
  auto mask = [&](std::span<const data::TokenIds* const> seqs, std::size_t t, bool& full) {
    Tensor m(rows, 1);
    full = true;
    for (std::size_t b = 0; b < batch; ++b) {
      const bool on = t < seqs[b]->size();
      m(static_cast<Eigen::Index>(b), 0) = on ? 1.0 : 0.0;
      full = full && on;
    }
    return m;
  };

  // Encoder. Input projections for all positions at once; rows are
  // time-major (row t * B + b is position t of batch entry b).
  std::vector<int> src_ids;
  src_ids.reserve(src_len * batch);
  for (std::size_t t = 0; t < src_len; ++t) {
    const auto col = column(sources, t);
    src_ids.insert(src_ids.end(), col.begin(), col.end());
  }
  const Var emb_all = g.embedding_lookup(pv.src_emb, std::move(src_ids));
  const Var gx_fwd = g.add(g.matmul(emb_all, pv.enc_fwd[0]), pv.enc_fwd[1]);
  const Var gx_bwd = g.add(g.matmul(emb_all, pv.enc_bwd[0]), pv.enc_bwd[1]);
  auto at = [&](Var all, std::size_t t) { return g.slice(all, 0, static_cast<Eigen::Index>(t) * rows, rows); };
  std::vector<Var> fwd(src_len);
  std::vector<Var> bwd(src_len);
  Var h = g.input(Tensor::Zero(rows, hidden));
  for (std::size_t t = 0; t < src_len; ++t) {
    h = gru_from_projection(g, pv.enc_fwd, at(gx_fwd, t), h, hidden);
    fwd[t] = h;
  }
  h = g.input(Tensor::Zero(rows, hidden));
  for (std::size_t t = src_len; t-- > 0;) {
    const Var next = gru_from_projection(g, pv.enc_bwd, at(gx_bwd, t), h, hidden);
    bool full = false;
    Tensor m = mask(sources, t, full);
    h = full ? next : g.add(h, g.mul(g.sub(next, h), g.input(std::move(m))));
    bwd[t] = h;
  }
  std::vector<Var> annot(src_len);
  for (std::size_t t = 0; t < src_len; ++t) {
    const Var pair[] = {fwd[t], bwd[t]};
    annot[t] = g.concat(pair, 1);
  }
  const auto steps = static_cast<Eigen::Index>(src_len);
  const Eigen::Index width = 2 * hidden;
  const Var annot_all = g.concat(annot, 0);
  const Var keys_all = g.matmul(annot_all, pv.att_u);
  const Var ones = g.input(Tensor::Ones(1, steps));
  bool any_src_pad = false;
  Tensor score_bias = Tensor::Zero(rows, steps);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = sources[b]->size(); t < src_len; ++t) {
      score_bias(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(t)) = -1e9;
      any_src_pad = true;
    }
  }
  const Var bias = any_src_pad ? g.input(std::move(score_bias)) : Var{};

  // Decoder. Previous-token embeddings are known in advance (teacher
  // forcing), so their share of the GRU input projection is batched too.
  const auto emb_dim = static_cast<Eigen::Index>(config.d_emb);
  std::vector<int> prev_ids(batch, data::kBos);
  std::vector<int> gold_ids;
  gold_ids.reserve(tgt_len * batch);
  for (std::size_t i = 0; i < tgt_len; ++i) {
    const auto col = column(targets, i);
    gold_ids.insert(gold_ids.end(), col.begin(), col.end());
    if (i + 1 < tgt_len) prev_ids.insert(prev_ids.end(), col.begin(), col.end());
  }
  const Var prev_emb = g.embedding_lookup(pv.tgt_emb, prev_ids);
  const Var wx_emb = g.slice(pv.dec[0], 0, 0, emb_dim);
  const Var wx_ctx = g.slice(pv.dec[0], 0, emb_dim, width);
  const Var gx_emb = g.add(g.matmul(prev_emb, wx_emb), pv.dec[1]);

  Var z = g.tanh(g.add(g.matmul(bwd[0], pv.init_w), pv.init_b));
  std::vector<Var> query_rep(src_len);
  std::vector<Var> states(tgt_len);
  std::vector<Var> contexts(tgt_len);
  for (std::size_t i = 0; i < tgt_len; ++i) {
    const Var query = g.add(g.matmul(z, pv.att_w), pv.att_b);
    std::fill(query_rep.begin(), query_rep.end(), query);
    const Var energy = g.matmul(g.tanh(g.add(keys_all, g.concat(query_rep, 0))), pv.att_v);
    Var s = g.transpose(g.reshape(energy, steps, rows));
    if (any_src_pad) s = g.add(s, bias);
    const Var alpha = g.softmax(s, 1);
    const Var alpha_col = g.reshape(g.transpose(alpha), steps * rows, 1);
    const Var weighted = g.reshape(g.mul(annot_all, alpha_col), steps, rows * width);
    const Var ctx = g.reshape(g.matmul(ones, weighted), rows, width);
    const Var gx = g.add(at(gx_emb, i), g.matmul(ctx, wx_ctx));
    z = gru_from_projection(g, pv.dec, gx, z, hidden);
    states[i] = z;
    contexts[i] = ctx;
  }

  // Readout and gold log-probabilities for all steps at once.
  const Var readout[] = {g.concat(states, 0), g.concat(contexts, 0), prev_emb};
  const Var logits = g.add(g.matmul(g.concat(readout, 1), pv.out_w), pv.out_b);
  Var picked = g.pick(g.log_softmax(logits, 1), std::move(gold_ids));
  const auto out_steps = static_cast<Eigen::Index>(tgt_len);
  bool any_tgt_pad = false;
  Tensor tgt_mask(out_steps * rows, 1);
  for (std::size_t i = 0; i < tgt_len; ++i) {
    for (std::size_t b = 0; b < batch; ++b) {
      const bool on = i < targets[b]->size();
      tgt_mask(static_cast<Eigen::Index>(i * batch + b), 0) = on ? 1.0 : 0.0;
      any_tgt_pad = any_tgt_pad || !on;
    }
  }
  if (any_tgt_pad) picked = g.mul(picked, g.input(std::move(tgt_mask)));
  // Sum over time: (L x B) -> 1 x B -> B x 1.
  const Var per_step = g.reshape(picked, out_steps, rows);
  return g.transpose(g.matmul(g.input(Tensor::Ones(1, out_steps)), per_step));
}

double graph_sequence_log_prob(ModelParams& params, const data::TokenIds& source,
                               const data::TokenIds& target, bool accumulate_grad) {
  Graph g;
  const ParamVars pv(g, params);
  const data::TokenIds* src[] = {&source};
  const data::TokenIds* tgt[] = {&target};
  const Var lp = batch_log_probs(g, pv, params.config, src, tgt);
  if (accumulate_grad) g.backward(g.sum(lp));
  return g.value(lp)(0, 0);
}

// ---- checkpoints --------------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'J', 'T', 'N', 'M', 'T', 'C', 'K', '1'};

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"src_vocab", c.src_vocab}, {"tgt_vocab", c.tgt_vocab}, {"d_emb", c.d_emb},
          {"d_hidden", c.d_hidden},   {"d_att", c.d_att},         {"max_len", c.max_len}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.src_vocab = j.at("src_vocab");
  c.tgt_vocab = j.at("tgt_vocab");
  c.d_emb = j.at("d_emb");
  c.d_hidden = j.at("d_hidden");
  c.d_att = j.at("d_att");
  c.max_len = j.at("max_len");
  return c;
}
}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  nlohmann::json header;
  header["format"] = 1;
  header["config"] = config_to_json(params.config);
  header["seed"] = params.seed;
  header["lineage"] = params.lineage;
  nlohmann::json tensors = nlohmann::json::array();
  for (const Parameter* p : params.all()) {
    tensors.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
  }
  header["tensors"] = tensors;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t n = text.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Parameter* p : params.all()) {
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing checkpoint: expected " + path.string());
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error(path.string() + " is not a checkpoint file");
  }
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  std::string text(n, '\0');
  in.read(text.data(), static_cast<std::streamsize>(n));
  const nlohmann::json header = nlohmann::json::parse(text);
  ModelParams params = zero_params(config_from_json(header.at("config")));
  params.seed = header.at("seed");
  params.lineage = header.at("lineage").get<std::vector<std::string>>();
  const auto& tensors = header.at("tensors");
  auto all = params.all();
  if (tensors.size() != all.size()) throw std::runtime_error("checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < all.size(); ++i) {
    Parameter& p = *all[i];
    if (tensors[i].at("name") != p.name || tensors[i].at("rows") != p.value.rows() ||
        tensors[i].at("cols") != p.value.cols()) {
      throw std::runtime_error("checkpoint tensor " + tensors[i].dump() + " does not match " +
                               p.name);
    }
    in.read(reinterpret_cast<char*>(p.value.data()),
            static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  }
  if (!in) throw std::runtime_error("truncated checkpoint " + path.string());
  return params;
}

}  // namespace jtnmt::model
