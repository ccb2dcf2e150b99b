#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rd2/nn.hpp"

#include <random>
#include <sstream>

using namespace rd2::nn;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

std::vector<MatrixXd> random_inputs(int T, int batch, int dim,
                                    std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> gauss(0.0, scale);
    std::vector<MatrixXd> xs(T, MatrixXd(batch, dim));
    for (auto& x : xs)
        for (int i = 0; i < batch; ++i)
            for (int j = 0; j < dim; ++j) x(i, j) = gauss(rng);
    return xs;
}

NetworkSpec tiny_spec(CellKind cell, bool critic, int hidden = 5) {
    NetworkSpec s;
    s.obs_dim = 3;
    s.action_dim = 2;
    s.hidden = hidden;
    s.recurrent_hidden = hidden;
    s.cell = cell;
    s.critic = critic;
    return s;
}

// Scalar loss for the finite-difference oracle: weighted sum of outputs
// against fixed targets, weights playing the role of IS weights.
double oracle_loss(const NetworkParams& p, const std::vector<MatrixXd>& inputs,
                   const std::vector<MatrixXd>& weights,
                   const VectorXd* limits) {
    ForwardCache cache;
    RecurrentState st = RecurrentState::zero(p.spec, inputs[0].rows());
    if (limits)
        forward_actor(p, inputs, *limits, st, cache);
    else
        forward(p, inputs, st, cache);
    double loss = 0.0;
    for (std::size_t t = 0; t < inputs.size(); ++t)
        loss += (weights[t].cwiseProduct(cache.steps[t].out)).sum();
    return loss;
}

// Central finite differences over every parameter.
VectorXd fd_gradient(NetworkParams p, const std::vector<MatrixXd>& inputs,
                     const std::vector<MatrixXd>& weights,
                     const VectorXd* limits, double h = 1e-5) {
    VectorXd theta = p.to_vector();
    VectorXd grad(theta.size());
    for (int i = 0; i < theta.size(); ++i) {
        VectorXd up = theta, dn = theta;
        up[i] += h;
        dn[i] -= h;
        p.from_vector(up);
        const double fu = oracle_loss(p, inputs, weights, limits);
        p.from_vector(dn);
        const double fd = oracle_loss(p, inputs, weights, limits);
        grad[i] = (fu - fd) / (2.0 * h);
    }
    return grad;
}

double max_rel_error(const VectorXd& a, const VectorXd& b) {
    double worst = 0.0;
    for (int i = 0; i < a.size(); ++i) {
        const double scale = std::max({std::abs(a[i]), std::abs(b[i]), 1e-6});
        worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
    }
    return worst;
}

}  // namespace

TEST_CASE("parameter count matches closed form") {
    NetworkSpec table;  // defaults: 6 obs, 6 act, 256/256, actor
    // 6*256+256 + 4*256*(256+256)+4*256 + 6*256+6
    CHECK(param_count(table) == 6 * 256 + 256 + 1024 * 512 + 1024 + 6 * 256 + 6);
    NetworkSpec critic = table;
    critic.critic = true;
    CHECK(param_count(critic) == 12 * 256 + 256 + 1024 * 512 + 1024 + 256 + 1);
    NetworkSpec nomem = table;
    nomem.cell = CellKind::None;
    CHECK(param_count(nomem) == 6 * 256 + 256 + 6 * 256 + 6);
    for (CellKind c : {CellKind::Lstm, CellKind::ReluRnn, CellKind::None}) {
        const NetworkSpec s = tiny_spec(c, true);
        CHECK(make_params(s, 7).to_vector().size() == param_count(s));
    }
}

TEST_CASE("zero weights give zero outputs") {
    std::mt19937_64 rng(11);
    const NetworkSpec s = tiny_spec(CellKind::Lstm, false);
    NetworkParams p = zero_params(s);
    auto inputs = random_inputs(4, 2, s.input_dim(), rng);
    ForwardCache cache;
    VectorXd limits = VectorXd::Constant(2, 0.5);
    forward_actor(p, inputs, limits, RecurrentState::zero(s, 2), cache);
    for (const auto& st : cache.steps)
        CHECK(st.out.cwiseAbs().maxCoeff() == 0.0);

    NetworkParams q = zero_params(tiny_spec(CellKind::Lstm, true));
    auto qin = random_inputs(4, 2, 5, rng);
    ForwardCache qc;
    forward(q, qin, RecurrentState::zero(q.spec, 2), qc);
    for (const auto& st : qc.steps) CHECK(st.out.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward is deterministic and batch rows are independent") {
    std::mt19937_64 rng(12);
    const NetworkSpec s = tiny_spec(CellKind::Lstm, true);
    NetworkParams p = make_params(s, 3);
    auto inputs = random_inputs(5, 3, s.input_dim(), rng);
    ForwardCache a, b;
    forward(p, inputs, RecurrentState::zero(s, 3), a);
    forward(p, inputs, RecurrentState::zero(s, 3), b);
    for (int t = 0; t < 5; ++t)
        CHECK((a.steps[t].out - b.steps[t].out).cwiseAbs().maxCoeff() == 0.0);

    // permuting batch rows permutes outputs identically
    std::vector<MatrixXd> permuted = inputs;
    for (auto& x : permuted) {
        x.row(0).swap(x.row(2));
    }
    ForwardCache c;
    forward(p, permuted, RecurrentState::zero(s, 3), c);
    for (int t = 0; t < 5; ++t) {
        CHECK((c.steps[t].out.row(0) - a.steps[t].out.row(2)).cwiseAbs().maxCoeff() == 0.0);
        CHECK((c.steps[t].out.row(2) - a.steps[t].out.row(0)).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("unroll splitting: carried state equals one-shot unroll") {
    std::mt19937_64 rng(13);
    for (CellKind cell : {CellKind::Lstm, CellKind::ReluRnn}) {
        const NetworkSpec s = tiny_spec(cell, false);
        NetworkParams p = make_params(s, 5);
        VectorXd limits = VectorXd::Constant(2, 1.0);
        auto inputs = random_inputs(2, 1, s.input_dim(), rng);

        ForwardCache both;
        forward_actor(p, inputs, limits, RecurrentState::zero(s, 1), both);

        ForwardCache first, second;
        forward_actor(p, {inputs[0]}, limits, RecurrentState::zero(s, 1), first);
        forward_actor(p, {inputs[1]}, limits, first.final_state(), second);

        CHECK((both.steps[0].out - first.steps[0].out).cwiseAbs().maxCoeff() <
              1e-12);
        CHECK((both.steps[1].out - second.steps[0].out).cwiseAbs().maxCoeff() <
              1e-12);
    }
}

TEST_CASE("actor output bounded at extreme inputs") {
    std::mt19937_64 rng(14);
    const NetworkSpec s = tiny_spec(CellKind::Lstm, false);
    NetworkParams p = make_params(s, 9);
    VectorXd limits(2);
    limits << 0.02, 0.1;
    auto inputs = random_inputs(3, 2, s.input_dim(), rng, 1e6);
    ForwardCache cache;
    forward_actor(p, inputs, limits, RecurrentState::zero(s, 2), cache);
    for (const auto& st : cache.steps) {
        CHECK(st.out.col(0).cwiseAbs().maxCoeff() <= 0.02);
        CHECK(st.out.col(1).cwiseAbs().maxCoeff() <= 0.1);
    }
}

TEST_CASE("zero start state isolates sequences") {
    std::mt19937_64 rng(15);
    const NetworkSpec s = tiny_spec(CellKind::Lstm, false);
    NetworkParams p = make_params(s, 21);
    VectorXd limits = VectorXd::Constant(2, 1.0);
    auto warmup = random_inputs(6, 1, s.input_dim(), rng);
    auto probe = random_inputs(3, 1, s.input_dim(), rng);

    ForwardCache w;
    forward_actor(p, warmup, limits, RecurrentState::zero(s, 1), w);
    ForwardCache after, fresh;
    forward_actor(p, probe, limits, RecurrentState::zero(s, 1), after);
    forward_actor(p, probe, limits, RecurrentState::zero(s, 1), fresh);
    for (int t = 0; t < 3; ++t)
        CHECK((after.steps[t].out - fresh.steps[t].out).cwiseAbs().maxCoeff() ==
              0.0);
}

TEST_CASE("BPTT matches central finite differences") {
    // miniature networks, 20 seeds, both heads and all cell kinds
    for (int seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(100 + seed);
        const CellKind cell = static_cast<CellKind>(seed % 3);
        const bool critic = seed % 2 == 0;
        const NetworkSpec s = tiny_spec(cell, critic, 4 + seed % 5);
        NetworkParams p = make_params(s, 1000 + seed);
        // head init is tiny by default; scale up so the loss is non-trivial
        p.wo *= 100.0;

        const int T = 6, B = 2;
        auto inputs = random_inputs(T, B, s.input_dim(), rng);
        std::vector<MatrixXd> weights =
            random_inputs(T, B, s.output_dim(), rng);
        VectorXd limits = VectorXd::Constant(s.output_dim(), 0.7);
        const VectorXd* lim = critic ? nullptr : &limits;

        ForwardCache cache;
        RecurrentState st = RecurrentState::zero(s, B);
        if (critic)
            forward(p, inputs, st, cache);
        else
            forward_actor(p, inputs, limits, st, cache);
        Gradients grads;
        backward(cache, weights, lim, grads);

        const VectorXd fd = fd_gradient(p, inputs, weights, lim);
        CHECK(max_rel_error(grads.to_vector(), fd) < 1e-4);
    }
}

TEST_CASE("backward: zero weights give zero gradients, and linearity") {
    std::mt19937_64 rng(16);
    const NetworkSpec s = tiny_spec(CellKind::Lstm, true);
    NetworkParams p = make_params(s, 77);
    const int T = 4, B = 2;
    auto inputs = random_inputs(T, B, s.input_dim(), rng);

    ForwardCache cache;
    forward(p, inputs, RecurrentState::zero(s, B), cache);

    std::vector<MatrixXd> zero_w(T, MatrixXd::Zero(B, 1));
    Gradients gz;
    backward(cache, zero_w, nullptr, gz);
    CHECK(gz.to_vector().cwiseAbs().maxCoeff() == 0.0);

    auto w = random_inputs(T, B, 1, rng);
    std::vector<MatrixXd> w2 = w;
    for (auto& m : w2) m *= 2.0;
    Gradients g1, g2;
    backward(cache, w, nullptr, g1);
    backward(cache, w2, nullptr, g2);
    CHECK((g2.to_vector() - 2.0 * g1.to_vector()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("backward propagates gradients to the input") {
    std::mt19937_64 rng(17);
    const NetworkSpec s = tiny_spec(CellKind::Lstm, true);
    NetworkParams p = make_params(s, 55);
    p.wo *= 100.0;
    const int T = 3;
    auto inputs = random_inputs(T, 1, s.input_dim(), rng);
    auto weights = random_inputs(T, 1, 1, rng);

    ForwardCache cache;
    forward(p, inputs, RecurrentState::zero(s, 1), cache);
    Gradients g;
    std::vector<MatrixXd> grad_in;
    backward(cache, weights, nullptr, g, &grad_in);

    // finite differences on one input coordinate
    const double h = 1e-6;
    for (int k = 0; k < s.input_dim(); ++k) {
        auto up = inputs, dn = inputs;
        up[1](0, k) += h;
        dn[1](0, k) -= h;
        const double fu = oracle_loss(p, up, weights, nullptr);
        const double fd = oracle_loss(p, dn, weights, nullptr);
        const double fdg = (fu - fd) / (2.0 * h);
        CHECK(grad_in[1](0, k) == doctest::Approx(fdg).epsilon(1e-4));
    }
}

TEST_CASE("hard update copies exactly, idempotently, bumps version") {
    NetworkParams online = make_params(tiny_spec(CellKind::Lstm, true), 1);
    NetworkParams target = make_params(tiny_spec(CellKind::Lstm, true), 2);
    const std::uint64_t v0 = target.version;
    hard_update(target, online);
    CHECK((target.to_vector() - online.to_vector()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(target.version == v0 + 1);
    hard_update(target, online);
    CHECK((target.to_vector() - online.to_vector()).cwiseAbs().maxCoeff() == 0.0);

    NetworkParams other = make_params(tiny_spec(CellKind::ReluRnn, true), 3);
    CHECK_THROWS_AS(hard_update(other, online), NetworkError);
}

TEST_CASE("target lags online by the update frequency in version units") {
    const NetworkSpec s = tiny_spec(CellKind::Lstm, true, 4);
    NetworkParams online = make_params(s, 1);
    NetworkParams target = online;
    Adam opt;
    opt.lr = 1e-3;
    Gradients g;
    g.set_zero(s);
    g.w1.setConstant(0.1);
    const int freq = 5;
    for (int step = 1; step <= 20; ++step) {
        opt.step(online, g);
        if (step % freq == 0) {
            hard_update(target, online);
            CHECK(target.w1.isApprox(online.w1));
        }
    }
    CHECK(online.version == 20);
}

TEST_CASE("adam moves parameters downhill and clips gradients") {
    const NetworkSpec s = tiny_spec(CellKind::None, true, 4);
    NetworkParams p = zero_params(s);
    Adam opt;
    opt.lr = 0.1;
    opt.grad_clip = 1.0;
    Gradients g;
    g.set_zero(s);
    g.b1.setConstant(100.0);
    const VectorXd before = p.to_vector();
    opt.step(p, g);
    const VectorXd after = p.to_vector();
    CHECK((after - before).cwiseAbs().maxCoeff() > 0.0);
    for (int i = 0; i < p.b1.size(); ++i) CHECK(p.b1[i] < 0.0);
}

TEST_CASE("serialization round-trips bit-exactly") {
    NetworkParams p = make_params(tiny_spec(CellKind::Lstm, false), 99);
    p.version = 1234;
    std::stringstream ss;
    serialize_params(p, ss);
    NetworkParams q = deserialize_params(ss);
    CHECK(q.spec == p.spec);
    CHECK(q.version == p.version);
    CHECK((q.to_vector() - p.to_vector()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("corrupted checkpoint header rejected") {
    NetworkParams p = make_params(tiny_spec(CellKind::Lstm, false), 99);
    std::stringstream ss;
    serialize_params(p, ss);
    std::string data = ss.str();
    data[0] = 'X';
    std::stringstream bad(data);
    CHECK_THROWS_AS(deserialize_params(bad), NetworkError);
}

TEST_CASE("recurrence-off checkpoint refuses to load into recurrent spec") {
    NetworkParams nomem = make_params(tiny_spec(CellKind::None, false), 5);
    std::stringstream ss;
    serialize_params(nomem, ss);
    NetworkParams loaded = deserialize_params(ss);
    CHECK(loaded.spec.cell == CellKind::None);
    const NetworkSpec want = tiny_spec(CellKind::Lstm, false);
    CHECK(loaded.spec != want);  // caller-side compatibility gate
    CHECK(loaded.wx.size() == 0);
}

TEST_CASE("non-finite activations raise with the step index") {
    const NetworkSpec s = tiny_spec(CellKind::Lstm, true);
    NetworkParams p = make_params(s, 1);
    p.wo.setConstant(std::numeric_limits<double>::infinity());
    std::vector<MatrixXd> inputs(2, MatrixXd::Ones(1, s.input_dim()));
    ForwardCache cache;
    try {
        forward(p, inputs, RecurrentState::zero(s, 1), cache);
        FAIL("expected NetworkError");
    } catch (const NetworkError& ex) {
        CHECK(std::string(ex.what()).find("step 0") != std::string::npos);
    }
}
