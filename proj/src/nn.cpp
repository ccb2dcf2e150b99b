#include "rd2/nn.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace rd2::nn {

namespace {

MatrixXd relu(const MatrixXd& x) { return x.cwiseMax(0.0); }

MatrixXd sigmoid(const MatrixXd& x) {
    return ((-x.array()).exp() + 1.0).inverse().matrix();
}

MatrixXd orthogonal(int rows, int cols, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    const int n = std::max(rows, cols);
    MatrixXd a(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) a(i, j) = dist(rng);
    Eigen::HouseholderQR<MatrixXd> qr(a);
    MatrixXd q = qr.householderQ();
    MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < n; ++j)
        if (r(j, j) < 0) q.col(j) = -q.col(j);
    return q.topLeftCorner(rows, cols);
}

MatrixXd fan_in_uniform(int rows, int cols, int fan_in, double scale,
                        std::mt19937_64& rng) {
    const double bound = scale / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = dist(rng);
    return m;
}

int gate_rows(const NetworkSpec& spec) {
    switch (spec.cell) {
        case CellKind::Lstm: return 4 * spec.recurrent_hidden;
        case CellKind::ReluRnn: return spec.recurrent_hidden;
        case CellKind::None: return 0;
    }
    return 0;
}

}  // namespace

std::int64_t param_count(const NetworkSpec& spec) {
    std::int64_t n = 0;
    n += static_cast<std::int64_t>(spec.hidden) * spec.input_dim() + spec.hidden;
    const int gr = gate_rows(spec);
    if (gr > 0)
        n += static_cast<std::int64_t>(gr) * (spec.hidden + spec.recurrent_hidden) + gr;
    n += static_cast<std::int64_t>(spec.output_dim()) * spec.head_input_dim() +
         spec.output_dim();
    return n;
}

std::int64_t NetworkParams::size() const { return param_count(spec); }

bool NetworkParams::all_finite() const {
    return w1.allFinite() && b1.allFinite() && wo.allFinite() &&
           bo.allFinite() && wx.allFinite() && wh.allFinite() && bg.allFinite();
}

VectorXd NetworkParams::to_vector() const {
    VectorXd v(size());
    std::int64_t off = 0;
    auto put = [&](const MatrixXd& m) {
        v.segment(off, m.size()) = Eigen::Map<const VectorXd>(m.data(), m.size());
        off += m.size();
    };
    put(w1);
    put(b1);
    put(wx);
    put(wh);
    put(bg);
    put(wo);
    put(bo);
    return v;
}

void NetworkParams::from_vector(const VectorXd& v) {
    if (v.size() != size())
        throw NetworkError("parameter vector size mismatch");
    std::int64_t off = 0;
    auto get = [&](MatrixXd& m) {
        Eigen::Map<VectorXd>(m.data(), m.size()) = v.segment(off, m.size());
        off += m.size();
    };
    auto getv = [&](VectorXd& x) {
        x = v.segment(off, x.size());
        off += x.size();
    };
    get(w1);
    getv(b1);
    get(wx);
    get(wh);
    getv(bg);
    get(wo);
    getv(bo);
}

NetworkParams zero_params(const NetworkSpec& spec) {
    NetworkParams p;
    p.spec = spec;
    p.w1 = MatrixXd::Zero(spec.hidden, spec.input_dim());
    p.b1 = VectorXd::Zero(spec.hidden);
    const int gr = gate_rows(spec);
    p.wx = MatrixXd::Zero(gr, spec.hidden);
    p.wh = MatrixXd::Zero(gr, gr > 0 ? spec.recurrent_hidden : 0);
    p.bg = VectorXd::Zero(gr);
    p.wo = MatrixXd::Zero(spec.output_dim(), spec.head_input_dim());
    p.bo = VectorXd::Zero(spec.output_dim());
    return p;
}

NetworkParams make_params(const NetworkSpec& spec, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    NetworkParams p = zero_params(spec);
    p.w1 = fan_in_uniform(spec.hidden, spec.input_dim(), spec.input_dim(), 1.0, rng);
    const int h = spec.recurrent_hidden;
    if (spec.cell == CellKind::Lstm) {
        p.wx = fan_in_uniform(4 * h, spec.hidden, spec.hidden, 1.0, rng);
        for (int g = 0; g < 4; ++g)
            p.wh.middleRows(g * h, h) = orthogonal(h, h, rng);
        // forget gate bias 1 (standard)
        p.bg.segment(h, h).setOnes();
    } else if (spec.cell == CellKind::ReluRnn) {
        p.wx = fan_in_uniform(h, spec.hidden, spec.hidden, 1.0, rng);
        p.wh = orthogonal(h, h, rng);
    }
    // small head so the initial policy commands near-zero motion
    p.wo = fan_in_uniform(spec.output_dim(), spec.head_input_dim(),
                          spec.head_input_dim(), 1e-3, rng);
    return p;
}

RecurrentState RecurrentState::zero(const NetworkSpec& spec, int batch) {
    const int h = spec.cell == CellKind::None ? 0 : spec.recurrent_hidden;
    return {MatrixXd::Zero(batch, h), MatrixXd::Zero(batch, h)};
}

RecurrentState ForwardCache::final_state() const {
    if (steps.empty()) return {h0, c0};
    return {steps.back().h, steps.back().c};
}

void forward(const NetworkParams& params, const std::vector<MatrixXd>& inputs,
             const RecurrentState& state0, ForwardCache& cache) {
    const NetworkSpec& spec = params.spec;
    const int T = static_cast<int>(inputs.size());
    if (T == 0) throw NetworkError("empty input sequence");
    const int batch = static_cast<int>(inputs[0].rows());
    const int h = spec.recurrent_hidden;

    cache.params = &params;
    cache.h0 = state0.hidden;
    cache.c0 = state0.cell;
    cache.steps.assign(T, {});

    MatrixXd hprev = state0.hidden, cprev = state0.cell;
    if (spec.cell != CellKind::None &&
        (hprev.rows() != batch || hprev.cols() != h))
        throw NetworkError("recurrent state shape mismatch");

    for (int t = 0; t < T; ++t) {
        StepCache& s = cache.steps[t];
        if (inputs[t].cols() != spec.input_dim())
            throw NetworkError("input dim mismatch at step " + std::to_string(t));
        s.input = inputs[t];
        s.a1 = relu((s.input * params.w1.transpose()).rowwise() +
                    params.b1.transpose());
        switch (spec.cell) {
            case CellKind::Lstm: {
                s.gates = (s.a1 * params.wx.transpose() +
                           hprev * params.wh.transpose())
                              .rowwise() +
                          params.bg.transpose();
                s.gi = sigmoid(s.gates.leftCols(h));
                s.gf = sigmoid(s.gates.middleCols(h, h));
                s.gg = s.gates.middleCols(2 * h, h).array().tanh().matrix();
                s.go = sigmoid(s.gates.rightCols(h));
                s.c = s.gf.cwiseProduct(cprev) + s.gi.cwiseProduct(s.gg);
                s.c_act = relu(s.c);
                s.h = s.go.cwiseProduct(s.c_act);
                break;
            }
            case CellKind::ReluRnn: {
                s.gates = (s.a1 * params.wx.transpose() +
                           hprev * params.wh.transpose())
                              .rowwise() +
                          params.bg.transpose();
                s.h = relu(s.gates);
                s.c = MatrixXd::Zero(batch, h);
                break;
            }
            case CellKind::None: {
                s.h = s.a1;
                s.c = MatrixXd::Zero(batch, 0);
                break;
            }
        }
        s.zo = (s.h * params.wo.transpose()).rowwise() + params.bo.transpose();
        s.out = s.zo;
        if (!s.out.allFinite() || !s.h.allFinite())
            throw NetworkError("non-finite activation at step " +
                               std::to_string(t));
        if (spec.cell != CellKind::None) {
            hprev = s.h;
            cprev = s.c;
        }
    }
}

void forward_actor(const NetworkParams& params,
                   const std::vector<MatrixXd>& obs_seq,
                   const VectorXd& action_limits, const RecurrentState& state0,
                   ForwardCache& cache) {
    if (params.spec.critic)
        throw NetworkError("forward_actor called on a critic network");
    forward(params, obs_seq, state0, cache);
    for (auto& s : cache.steps)
        s.out = s.zo.array().tanh().matrix() * action_limits.asDiagonal();
}

void Gradients::set_zero(const NetworkSpec& spec) {
    NetworkParams z = zero_params(spec);
    w1 = z.w1;
    b1 = z.b1;
    wx = z.wx;
    wh = z.wh;
    bg = z.bg;
    wo = z.wo;
    bo = z.bo;
}

VectorXd Gradients::to_vector() const {
    std::int64_t n = w1.size() + b1.size() + wx.size() + wh.size() + bg.size() +
                     wo.size() + bo.size();
    VectorXd v(n);
    std::int64_t off = 0;
    auto put = [&](const MatrixXd& m) {
        v.segment(off, m.size()) = Eigen::Map<const VectorXd>(m.data(), m.size());
        off += m.size();
    };
    put(w1);
    put(b1);
    put(wx);
    put(wh);
    put(bg);
    put(wo);
    put(bo);
    return v;
}

void Gradients::axpy(double alpha, const Gradients& other) {
    w1 += alpha * other.w1;
    b1 += alpha * other.b1;
    wx += alpha * other.wx;
    wh += alpha * other.wh;
    bg += alpha * other.bg;
    wo += alpha * other.wo;
    bo += alpha * other.bo;
}

void backward(const ForwardCache& cache, const std::vector<MatrixXd>& grad_out,
              const VectorXd* actor_limits, Gradients& grads,
              std::vector<MatrixXd>* grad_input) {
    const NetworkParams& params = *cache.params;
    const NetworkSpec& spec = params.spec;
    const int T = static_cast<int>(cache.steps.size());
    if (static_cast<int>(grad_out.size()) != T)
        throw NetworkError("grad_out length does not match cached sequence");
    const int h = spec.recurrent_hidden;
    const int batch = static_cast<int>(cache.steps[0].input.rows());

    grads.set_zero(spec);
    if (grad_input) grad_input->assign(T, MatrixXd());

    MatrixXd dh_next = MatrixXd::Zero(batch, spec.cell == CellKind::None ? 0 : h);
    MatrixXd dc_next = dh_next;

    for (int t = T - 1; t >= 0; --t) {
        const StepCache& s = cache.steps[t];
        MatrixXd dzo;
        if (actor_limits) {
            const MatrixXd th = s.zo.array().tanh().matrix();
            dzo = (grad_out[t].cwiseProduct(
                       (1.0 - th.array().square()).matrix()))
                  * actor_limits->asDiagonal();
        } else {
            dzo = grad_out[t];
        }
        grads.wo += dzo.transpose() * s.h;
        grads.bo += dzo.colwise().sum().transpose();
        MatrixXd dhead = dzo * params.wo;  // grad wrt head input

        MatrixXd da1;
        switch (spec.cell) {
            case CellKind::Lstm: {
                const MatrixXd& cprev =
                    t == 0 ? cache.c0 : cache.steps[t - 1].c;
                const MatrixXd& hprev =
                    t == 0 ? cache.h0 : cache.steps[t - 1].h;
                MatrixXd dh = dhead + dh_next;
                MatrixXd dgo = dh.cwiseProduct(s.c_act);
                MatrixXd dc =
                    dh.cwiseProduct(s.go)
                        .cwiseProduct((s.c.array() > 0.0).cast<double>().matrix()) +
                    dc_next;
                MatrixXd dgi = dc.cwiseProduct(s.gg);
                MatrixXd dgf = dc.cwiseProduct(cprev);
                MatrixXd dgg = dc.cwiseProduct(s.gi);
                dc_next = dc.cwiseProduct(s.gf);

                MatrixXd dgates(batch, 4 * h);
                dgates.leftCols(h) =
                    dgi.cwiseProduct(s.gi).cwiseProduct((1.0 - s.gi.array()).matrix());
                dgates.middleCols(h, h) =
                    dgf.cwiseProduct(s.gf).cwiseProduct((1.0 - s.gf.array()).matrix());
                dgates.middleCols(2 * h, h) =
                    dgg.cwiseProduct((1.0 - s.gg.array().square()).matrix());
                dgates.rightCols(h) =
                    dgo.cwiseProduct(s.go).cwiseProduct((1.0 - s.go.array()).matrix());

                grads.wx += dgates.transpose() * s.a1;
                grads.wh += dgates.transpose() * hprev;
                grads.bg += dgates.colwise().sum().transpose();
                da1 = dgates * params.wx;
                dh_next = dgates * params.wh;
                break;
            }
            case CellKind::ReluRnn: {
                const MatrixXd& hprev =
                    t == 0 ? cache.h0 : cache.steps[t - 1].h;
                MatrixXd dh = dhead + dh_next;
                MatrixXd dz = dh.cwiseProduct(
                    (s.gates.array() > 0.0).cast<double>().matrix());
                grads.wx += dz.transpose() * s.a1;
                grads.wh += dz.transpose() * hprev;
                grads.bg += dz.colwise().sum().transpose();
                da1 = dz * params.wx;
                dh_next = dz * params.wh;
                break;
            }
            case CellKind::None: {
                da1 = dhead;
                break;
            }
        }

        MatrixXd dz1 =
            da1.cwiseProduct((s.a1.array() > 0.0).cast<double>().matrix());
        grads.w1 += dz1.transpose() * s.input;
        grads.b1 += dz1.colwise().sum().transpose();
        if (grad_input) (*grad_input)[t] = dz1 * params.w1;
    }
}

void Adam::step(NetworkParams& params, const Gradients& grads) {
    VectorXd g = grads.to_vector();
    if (grad_clip > 0.0) {
        const double n = g.norm();
        if (n > grad_clip) g *= grad_clip / n;
    }
    if (m.size() != g.size()) {
        m = VectorXd::Zero(g.size());
        v = VectorXd::Zero(g.size());
        t = 0;
    }
    ++t;
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    VectorXd update =
        (lr / bc1) * m.cwiseQuotient(((v / bc2).cwiseSqrt().array() + eps).matrix());
    VectorXd theta = params.to_vector() - update;
    params.from_vector(theta);
    params.version += 1;
}

void hard_update(NetworkParams& target, const NetworkParams& online) {
    if (target.spec != online.spec)
        throw NetworkError("hard_update spec mismatch");
    const std::uint64_t ver = target.version;
    const NetworkSpec spec = target.spec;
    target = online;
    target.spec = spec;
    target.version = ver + 1;
}

namespace {
constexpr std::uint32_t kMagic = 0x4e324452;  // "RD2N"
constexpr std::uint32_t kFormat = 1;

template <typename T>
void write_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T read_raw(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw NetworkError("truncated checkpoint");
    return v;
}
}  // namespace

void serialize_params(const NetworkParams& params, std::ostream& os) {
    write_raw(os, kMagic);
    write_raw(os, kFormat);
    write_raw(os, static_cast<std::int32_t>(params.spec.obs_dim));
    write_raw(os, static_cast<std::int32_t>(params.spec.action_dim));
    write_raw(os, static_cast<std::int32_t>(params.spec.hidden));
    write_raw(os, static_cast<std::int32_t>(params.spec.recurrent_hidden));
    write_raw(os, static_cast<std::uint32_t>(params.spec.cell));
    write_raw(os, static_cast<std::uint8_t>(params.spec.critic ? 1 : 0));
    write_raw(os, params.version);
    const VectorXd v = params.to_vector();
    write_raw(os, static_cast<std::int64_t>(v.size()));
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

NetworkParams deserialize_params(std::istream& is) {
    if (read_raw<std::uint32_t>(is) != kMagic)
        throw NetworkError("bad checkpoint magic");
    if (read_raw<std::uint32_t>(is) != kFormat)
        throw NetworkError("unsupported checkpoint format version");
    NetworkSpec spec;
    spec.obs_dim = read_raw<std::int32_t>(is);
    spec.action_dim = read_raw<std::int32_t>(is);
    spec.hidden = read_raw<std::int32_t>(is);
    spec.recurrent_hidden = read_raw<std::int32_t>(is);
    spec.cell = static_cast<CellKind>(read_raw<std::uint32_t>(is));
    spec.critic = read_raw<std::uint8_t>(is) != 0;
    const std::uint64_t version = read_raw<std::uint64_t>(is);
    const std::int64_t n = read_raw<std::int64_t>(is);
    if (n != param_count(spec))
        throw NetworkError("checkpoint payload length does not match spec");
    VectorXd v(n);
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw NetworkError("truncated checkpoint payload");
    NetworkParams p = zero_params(spec);
    p.from_vector(v);
    p.version = version;
    return p;
}

void save_params(const NetworkParams& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw NetworkError("cannot open " + path + " for writing");
    serialize_params(params, os);
}

NetworkParams load_params(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw NetworkError("cannot open " + path);
    return deserialize_params(is);
}

}  // namespace rd2::nn
