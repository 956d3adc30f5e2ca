#include "ver/nn.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <string>

namespace ver {

using nlohmann::json;

namespace {

constexpr Scalar kLog2Pi = 1.8378770664093453;  // log(2*pi)

Matrix orthogonal(int rows, int cols, Scalar gain, CounterRng rng) {
  const int big = std::max(rows, cols);
  const int small = std::min(rows, cols);
  Matrix g(big, small);
  for (int i = 0; i < big; ++i)
    for (int j = 0; j < small; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(big, small);
  Matrix r = qr.matrixQR().topRows(small);
  for (int j = 0; j < small; ++j) {
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  }
  if (rows < cols) q.transposeInPlace();
  return gain * q;
}

Matrix gru_cell(const PolicyParams& p, const Matrix& x, const Matrix& h) {
  Matrix rr = (x * p.gru_wr + h * p.gru_ur).rowwise() + p.gru_br.row(0);
  Matrix rz = (x * p.gru_wz + h * p.gru_uz).rowwise() + p.gru_bz.row(0);
  Matrix sr = (1.0 / (1.0 + (-rr.array()).exp())).matrix();
  Matrix sz = (1.0 / (1.0 + (-rz.array()).exp())).matrix();
  Matrix n = ((x * p.gru_wn + sr.cwiseProduct(h * p.gru_un)).rowwise() + p.gru_bn.row(0))
                 .array()
                 .tanh();
  return (1.0 - sz.array()).matrix().cwiseProduct(n) + sz.cwiseProduct(h);
}

Matrix encode(const PolicyParams& p, const Matrix& obs) {
  Matrix e1 = ((obs * p.enc_w1).rowwise() + p.enc_b1.row(0)).array().tanh();
  return ((e1 * p.enc_w2).rowwise() + p.enc_b2.row(0)).array().tanh();
}

}  // namespace

PolicyParams PolicyParams::init(const ModelConfig& cfg, std::uint64_t seed) {
  PolicyParams p;
  p.cfg = cfg;
  CounterRng rng(seed);
  const int E = cfg.encoder_dim;
  const int H = cfg.hidden_dim;
  const int A = cfg.action_kind == ActionKind::Discrete ? cfg.num_actions : cfg.act_dim;

  p.enc_w1 = orthogonal(cfg.obs_dim, E, std::sqrt(2.0), rng.stream(1));
  p.enc_b1 = Matrix::Zero(1, E);
  p.enc_w2 = orthogonal(E, E, std::sqrt(2.0), rng.stream(2));
  p.enc_b2 = Matrix::Zero(1, E);
  p.gru_wr = orthogonal(E, H, 1.0, rng.stream(3));
  p.gru_ur = orthogonal(H, H, 1.0, rng.stream(4));
  p.gru_br = Matrix::Zero(1, H);
  p.gru_wz = orthogonal(E, H, 1.0, rng.stream(5));
  p.gru_uz = orthogonal(H, H, 1.0, rng.stream(6));
  p.gru_bz = Matrix::Zero(1, H);
  p.gru_wn = orthogonal(E, H, 1.0, rng.stream(7));
  p.gru_un = orthogonal(H, H, 1.0, rng.stream(8));
  p.gru_bn = Matrix::Zero(1, H);
  p.head_w = orthogonal(H, A, 0.01, rng.stream(9));
  p.head_b = Matrix::Zero(1, A);
  if (cfg.action_kind == ActionKind::Continuous) {
    p.log_std = Matrix::Zero(1, cfg.act_dim);
  } else {
    p.log_std = Matrix(0, 0);
  }
  p.value_w = orthogonal(H, 1, 1.0, rng.stream(10));
  p.value_b = Matrix::Zero(1, 1);
  return p;
}

std::vector<std::pair<std::string, Matrix*>> PolicyParams::tensors() {
  std::vector<std::pair<std::string, Matrix*>> out = {
      {"enc_w1", &enc_w1}, {"enc_b1", &enc_b1}, {"enc_w2", &enc_w2}, {"enc_b2", &enc_b2},
      {"gru_wr", &gru_wr}, {"gru_ur", &gru_ur}, {"gru_br", &gru_br},
      {"gru_wz", &gru_wz}, {"gru_uz", &gru_uz}, {"gru_bz", &gru_bz},
      {"gru_wn", &gru_wn}, {"gru_un", &gru_un}, {"gru_bn", &gru_bn},
      {"head_w", &head_w}, {"head_b", &head_b},
      {"value_w", &value_w}, {"value_b", &value_b}};
  if (cfg.action_kind == ActionKind::Continuous) {
    out.emplace_back("log_std", &log_std);
  }
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> PolicyParams::tensors() const {
  auto mut = const_cast<PolicyParams*>(this)->tensors();
  std::vector<std::pair<std::string, const Matrix*>> out;
  out.reserve(mut.size());
  for (auto& [name, ptr] : mut) out.emplace_back(name, ptr);
  return out;
}

void PolicyParams::clamp_log_std() {
  if (log_std.size() > 0) {
    log_std = log_std.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  }
}

bool PolicyParams::all_finite() const {
  for (const auto& [name, t] : tensors()) {
    if (!t->allFinite()) return false;
  }
  return true;
}

ActResult act(const PolicyParams& p, const Matrix& obs, const Matrix& h) {
  if (!obs.allFinite()) throw ProtocolError("act: non-finite observation");
  ActResult out;
  Matrix e = encode(p, obs);
  out.h_new = gru_cell(p, e, h);
  out.dist = (out.h_new * p.head_w).rowwise() + p.head_b.row(0);
  out.value = ((out.h_new * p.value_w).rowwise() + p.value_b.row(0)).col(0);
  return out;
}

Vector value_only(const PolicyParams& p, const Matrix& obs, const Matrix& h) {
  Matrix e = encode(p, obs);
  Matrix hn = gru_cell(p, e, h);
  return ((hn * p.value_w).rowwise() + p.value_b.row(0)).col(0);
}

int sample_categorical(const RowVector& logits, CounterRng& rng) {
  RowVector z = logits.array() - logits.maxCoeff();
  RowVector p = z.array().exp();
  p /= p.sum();
  Scalar u = rng.uniform();
  Scalar acc = 0;
  for (int i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  return static_cast<int>(p.size()) - 1;
}

Scalar categorical_log_prob(const RowVector& logits, int action) {
  const Scalar m = logits.maxCoeff();
  const Scalar lse = m + std::log((logits.array() - m).exp().sum());
  return logits[action] - lse;
}

Scalar categorical_entropy(const RowVector& logits) {
  const Scalar m = logits.maxCoeff();
  RowVector z = (logits.array() - m).exp();
  const Scalar s = z.sum();
  RowVector p = z / s;
  Scalar h = 0;
  for (int i = 0; i < p.size(); ++i) {
    if (p[i] > 0) h -= p[i] * (logits[i] - m - std::log(s));
  }
  return h;
}

Vector sample_gaussian(const RowVector& mean, const Matrix& log_std, CounterRng& rng) {
  Vector a(mean.size());
  for (int i = 0; i < mean.size(); ++i) {
    a[i] = mean[i] + std::exp(log_std(0, i)) * rng.normal();
  }
  return a;
}

Scalar gaussian_log_prob(const RowVector& mean, const Matrix& log_std, const Vector& action) {
  Scalar lp = -0.5 * kLog2Pi * static_cast<Scalar>(mean.size());
  for (int i = 0; i < mean.size(); ++i) {
    const Scalar s = std::exp(log_std(0, i));
    const Scalar z = (action[i] - mean[i]) / s;
    lp += -0.5 * z * z - log_std(0, i);
  }
  return lp;
}

Scalar gaussian_entropy(const Matrix& log_std) {
  return log_std.sum() + 0.5 * (1.0 + kLog2Pi) * static_cast<Scalar>(log_std.cols());
}

TapeParams register_params(Tape& tape, const PolicyParams& p) {
  TapeParams tp;
  auto reg = [&](const Matrix& m) { return tape.leaf(m); };
  tp.enc_w1 = reg(p.enc_w1);
  tp.enc_b1 = reg(p.enc_b1);
  tp.enc_w2 = reg(p.enc_w2);
  tp.enc_b2 = reg(p.enc_b2);
  tp.gru_wr = reg(p.gru_wr);
  tp.gru_ur = reg(p.gru_ur);
  tp.gru_br = reg(p.gru_br);
  tp.gru_wz = reg(p.gru_wz);
  tp.gru_uz = reg(p.gru_uz);
  tp.gru_bz = reg(p.gru_bz);
  tp.gru_wn = reg(p.gru_wn);
  tp.gru_un = reg(p.gru_un);
  tp.gru_bn = reg(p.gru_bn);
  tp.head_w = reg(p.head_w);
  tp.head_b = reg(p.head_b);
  tp.value_w = reg(p.value_w);
  tp.value_b = reg(p.value_b);
  tp.ids = {tp.enc_w1, tp.enc_b1, tp.enc_w2, tp.enc_b2,
            tp.gru_wr, tp.gru_ur, tp.gru_br,
            tp.gru_wz, tp.gru_uz, tp.gru_bz,
            tp.gru_wn, tp.gru_un, tp.gru_bn,
            tp.head_w, tp.head_b, tp.value_w, tp.value_b};
  if (p.cfg.action_kind == ActionKind::Continuous) {
    tp.log_std = reg(p.log_std);
    tp.ids.push_back(tp.log_std);
  }
  return tp;
}

PackedForward forward_packed(Tape& tape, const TapeParams& tp, const ModelConfig& cfg,
                             const Matrix& obs_packed, const std::vector<int>& act_disc,
                             const Matrix& act_cont, const std::vector<int>& batch_sizes,
                             const std::vector<int>& offsets, const Matrix& h0_sorted) {
  if (!obs_packed.allFinite()) throw ProtocolError("forward_packed: non-finite observations");
  const int S = static_cast<int>(obs_packed.rows());

  // non-temporal parts batch over all timesteps at once
  auto obs = tape.constant(obs_packed);
  auto e1 = tape.tanh_op(tape.add_rowvec(tape.matmul(obs, tp.enc_w1), tp.enc_b1));
  auto enc = tape.tanh_op(tape.add_rowvec(tape.matmul(e1, tp.enc_w2), tp.enc_b2));

  auto h = tape.constant(h0_sorted);
  int h_rows = static_cast<int>(h0_sorted.rows());
  std::vector<Tape::NodeId> parts;
  parts.reserve(batch_sizes.size());
  for (std::size_t t = 0; t < batch_sizes.size(); ++t) {
    const int bs = batch_sizes[t];
    auto x = tape.rows(enc, offsets[t], bs);
    auto hp = bs < h_rows ? tape.rows(h, 0, bs) : h;
    auto r = tape.sigmoid_op(tape.add_rowvec(
        tape.add(tape.matmul(x, tp.gru_wr), tape.matmul(hp, tp.gru_ur)), tp.gru_br));
    auto z = tape.sigmoid_op(tape.add_rowvec(
        tape.add(tape.matmul(x, tp.gru_wz), tape.matmul(hp, tp.gru_uz)), tp.gru_bz));
    auto n = tape.tanh_op(tape.add_rowvec(
        tape.add(tape.matmul(x, tp.gru_wn), tape.cmul(r, tape.matmul(hp, tp.gru_un))),
        tp.gru_bn));
    auto omz = tape.add_scalar(tape.scale(z, -1.0), 1.0);
    h = tape.add(tape.cmul(omz, n), tape.cmul(z, hp));
    h_rows = bs;
    parts.push_back(h);
  }
  auto hidden = parts.size() == 1 ? parts[0] : tape.concat_rows(parts);

  PackedForward out;
  out.value = tape.add_rowvec(tape.matmul(hidden, tp.value_w), tp.value_b);

  auto dist = tape.add_rowvec(tape.matmul(hidden, tp.head_w), tp.head_b);
  if (cfg.action_kind == ActionKind::Discrete) {
    const int A = cfg.num_actions;
    // shift by a detached row max for a stable log-softmax
    Matrix shift = tape.value(dist).rowwise().maxCoeff().rowwise().replicate(A);
    auto shifted = tape.sub(dist, tape.constant(shift));
    auto lse = tape.log_op(tape.row_sum(tape.exp_op(shifted)));
    auto logp_all = tape.sub(shifted, tape.replicate_cols(lse, A));
    out.log_prob = tape.gather_cols(logp_all, act_disc);
    auto probs = tape.exp_op(logp_all);
    out.entropy = tape.scale(tape.row_sum(tape.cmul(probs, logp_all)), -1.0);
  } else {
    const int D = cfg.act_dim;
    auto logstd = tape.broadcast_rows(tp.log_std, S);
    auto inv_std = tape.exp_op(tape.scale(logstd, -1.0));
    auto diff = tape.sub(tape.constant(act_cont), dist);
    auto zsc = tape.cmul(diff, inv_std);
    auto quad = tape.scale(tape.row_sum(tape.cmul(zsc, zsc)), -0.5);
    out.log_prob = tape.add_scalar(tape.sub(quad, tape.row_sum(logstd)),
                                   -0.5 * kLog2Pi * static_cast<Scalar>(D));
    out.entropy = tape.add_scalar(tape.row_sum(logstd),
                                  0.5 * (1.0 + kLog2Pi) * static_cast<Scalar>(D));
  }
  return out;
}

AdamState make_adam(const PolicyParams& p) {
  AdamState st;
  for (const auto& [name, t] : p.tensors()) {
    st.m.push_back(Matrix::Zero(t->rows(), t->cols()));
    st.v.push_back(Matrix::Zero(t->rows(), t->cols()));
  }
  return st;
}

void adam_step(AdamState& st, PolicyParams& p, const std::vector<Matrix>& grads, Scalar lr) {
  auto ts = p.tensors();
  if (grads.size() != ts.size()) throw ProtocolError("adam_step: gradient count mismatch");
  ++st.step;
  const Scalar bc1 = 1.0 - std::pow(st.beta1, static_cast<Scalar>(st.step));
  const Scalar bc2 = 1.0 - std::pow(st.beta2, static_cast<Scalar>(st.step));
  for (std::size_t i = 0; i < ts.size(); ++i) {
    Matrix& w = *ts[i].second;
    const Matrix& g = grads[i];
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g.cwiseProduct(g);
    Matrix mhat = st.m[i] / bc1;
    Matrix vhat = st.v[i] / bc2;
    w.array() -= lr * mhat.array() / (vhat.array().sqrt() + st.eps);
  }
}

Scalar CosineSchedule::lr_at(long consumed) const {
  Scalar progress = static_cast<Scalar>(consumed) / static_cast<Scalar>(std::max(1L, total_steps));
  progress = std::min(std::max(progress, 0.0), 1.0);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

namespace {

json matrix_to_json(const Matrix& m) {
  json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  json data = json::array();
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  j["data"] = std::move(data);
  return j;
}

Matrix matrix_from_json(const json& j) {
  Matrix m(j.at("rows").get<int>(), j.at("cols").get<int>());
  const auto& data = j.at("data");
  int k = 0;
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) m(r, c) = data[k++].get<Scalar>();
  return m;
}

}  // namespace

json params_to_json(const PolicyParams& p) {
  json j;
  j["obs_dim"] = p.cfg.obs_dim;
  j["encoder_dim"] = p.cfg.encoder_dim;
  j["hidden_dim"] = p.cfg.hidden_dim;
  j["action_kind"] = p.cfg.action_kind == ActionKind::Discrete ? "discrete" : "continuous";
  j["num_actions"] = p.cfg.num_actions;
  j["act_dim"] = p.cfg.act_dim;
  json t;
  for (const auto& [name, m] : p.tensors()) t[name] = matrix_to_json(*m);
  j["tensors"] = std::move(t);
  return j;
}

PolicyParams params_from_json(const json& j) {
  ModelConfig cfg;
  cfg.obs_dim = j.at("obs_dim");
  cfg.encoder_dim = j.at("encoder_dim");
  cfg.hidden_dim = j.at("hidden_dim");
  cfg.action_kind = j.at("action_kind") == "discrete" ? ActionKind::Discrete
                                                      : ActionKind::Continuous;
  cfg.num_actions = j.at("num_actions");
  cfg.act_dim = j.at("act_dim");
  PolicyParams p = PolicyParams::init(cfg, 0);
  for (auto& [name, m] : p.tensors()) {
    *m = matrix_from_json(j.at("tensors").at(name));
  }
  return p;
}

json adam_to_json(const AdamState& st) {
  json j;
  j["step"] = st.step;
  json m = json::array(), v = json::array();
  for (const auto& t : st.m) m.push_back(matrix_to_json(t));
  for (const auto& t : st.v) v.push_back(matrix_to_json(t));
  j["m"] = std::move(m);
  j["v"] = std::move(v);
  return j;
}

AdamState adam_from_json(const json& j, const PolicyParams& p) {
  AdamState st = make_adam(p);
  st.step = j.at("step");
  for (std::size_t i = 0; i < st.m.size(); ++i) {
    st.m[i] = matrix_from_json(j.at("m")[i]);
    st.v[i] = matrix_from_json(j.at("v")[i]);
  }
  return st;
}

}  // namespace ver
