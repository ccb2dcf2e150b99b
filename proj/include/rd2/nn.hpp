#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace rd2::nn {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct NetworkError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Recurrent cell flavor. Lstm is the gated cell with a ReLU output
// nonlinearity on the cell-output path; ReluRnn is a plain recurrent ReLU
// layer; None drops the recurrent layer entirely (memoryless ablation).
enum class CellKind : std::uint32_t { Lstm = 0, ReluRnn = 1, None = 2 };

struct NetworkSpec {
    int obs_dim = 6;
    int action_dim = 6;
    int hidden = 256;
    int recurrent_hidden = 256;
    CellKind cell = CellKind::Lstm;
    bool critic = false;  // critic: (obs, action) in, scalar out, no squash

    int input_dim() const { return critic ? obs_dim + action_dim : obs_dim; }
    int output_dim() const { return critic ? 1 : action_dim; }
    // Width feeding the head: recurrent output, or the first FC layer when
    // the recurrent cell is absent.
    int head_input_dim() const {
        return cell == CellKind::None ? hidden : recurrent_hidden;
    }
    bool operator==(const NetworkSpec&) const = default;
};

// Closed-form parameter count for a spec.
std::int64_t param_count(const NetworkSpec& spec);

struct NetworkParams {
    NetworkSpec spec;
    MatrixXd w1, wo;       // first FC and head
    VectorXd b1, bo;
    MatrixXd wx, wh;       // recurrent kernels (empty when cell == None)
    VectorXd bg;
    std::uint64_t version = 0;

    std::int64_t size() const;
    VectorXd to_vector() const;
    void from_vector(const VectorXd& v);
    bool all_finite() const;
};

NetworkParams make_params(const NetworkSpec& spec, std::uint64_t seed);
NetworkParams zero_params(const NetworkSpec& spec);

struct RecurrentState {
    MatrixXd hidden;  // batch x H
    MatrixXd cell;

    static RecurrentState zero(const NetworkSpec& spec, int batch);
};

// Per-step activations cached by forward() for the backward pass.
struct StepCache {
    MatrixXd input;        // batch x in
    MatrixXd a1;           // post-ReLU first layer
    MatrixXd gates;        // batch x 4H pre-activation (LSTM) or batch x H
    MatrixXd gi, gf, gg, go;  // post-activation gates (LSTM)
    MatrixXd c, c_act, h;  // cell, activated cell, recurrent output
    MatrixXd zo;           // head pre-activation
    MatrixXd out;
};

struct ForwardCache {
    const NetworkParams* params = nullptr;
    MatrixXd h0, c0;
    std::vector<StepCache> steps;
    RecurrentState final_state() const;
};

// Unrolls the network over a batched sequence. inputs[t] is batch x in_dim
// (obs for the actor, obs||action for the critic). Outputs land in
// cache.steps[t].out. Throws NetworkError carrying the step index on
// non-finite activations.
void forward(const NetworkParams& params,
             const std::vector<MatrixXd>& inputs,
             const RecurrentState& state0,
             ForwardCache& cache);

// Actor head bound: out = limits .* tanh(z), componentwise.
void forward_actor(const NetworkParams& params,
                   const std::vector<MatrixXd>& obs_seq,
                   const VectorXd& action_limits,
                   const RecurrentState& state0,
                   ForwardCache& cache);

struct Gradients {
    MatrixXd w1, wo, wx, wh;
    VectorXd b1, bo, bg;

    void set_zero(const NetworkSpec& spec);
    VectorXd to_vector() const;
    void axpy(double alpha, const Gradients& other);
};

// Exact reverse-mode gradients through the unrolled computation. grad_out[t]
// is dLoss/d(out_t), batch x out_dim; the caller folds any per-transition
// loss weights into it (weight 0 rows contribute nothing). grad_input, when
// non-null, receives dLoss/d(input_t) for chaining critic gradients into the
// actor.
void backward(const ForwardCache& cache,
              const std::vector<MatrixXd>& grad_out,
              const VectorXd* actor_limits,  // null for critic/raw output
              Gradients& grads,
              std::vector<MatrixXd>* grad_input = nullptr);

struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double grad_clip = 10.0;  // global norm; <=0 disables
    VectorXd m, v;
    std::int64_t t = 0;

    void step(NetworkParams& params, const Gradients& grads);
};

void hard_update(NetworkParams& target, const NetworkParams& online);

void serialize_params(const NetworkParams& params, std::ostream& os);
NetworkParams deserialize_params(std::istream& is);
void save_params(const NetworkParams& params, const std::string& path);
NetworkParams load_params(const std::string& path);

}  // namespace rd2::nn
