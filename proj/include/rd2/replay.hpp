#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <mutex>
#include <random>
#include <stdexcept>
#include <vector>

namespace rd2::replay {

using Eigen::MatrixXd;
using Vector6d = Eigen::Matrix<double, 6, 1>;

struct ReplayError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Transition {
    Vector6d obs = Vector6d::Zero();
    Vector6d action = Vector6d::Zero();
    double reward = 0.0;
    bool terminal = false;
    bool valid = true;  // false for front padding
};

// Fixed-length chain of m transitions. Pad transitions, if any, form a
// prefix and never mix with real data from another episode.
struct Sequence {
    std::vector<Transition> transitions;
    std::uint64_t episode_id = 0;
    int start_index = 0;  // episode index of the first *valid* transition

    int length() const { return static_cast<int>(transitions.size()); }
    int pad_count() const;
};

// Breaks one episode into sequences of length m (m even) with m/2 overlap
// between adjacent sequences; the final pair overlaps by
// m - (T mod m/2) when T mod m/2 != 0, else m/2, so the last sequence ends
// exactly at the episode's final transition. T < m yields a single
// front-padded sequence.
std::vector<Sequence> segment_episode(const std::vector<Transition>& episode,
                                      int m, std::uint64_t episode_id);

// p = eta * max|delta| + (1 - eta) * mean|delta| over valid transitions.
double compute_sequence_priority(const std::vector<double>& abs_td, double eta);

// Complete binary tree of priority sums; proportional prefix lookup in
// O(log n). Periodically rebuilt bottom-up to cancel float drift.
class SumTree {
public:
    explicit SumTree(int capacity);

    void set(int index, double priority);
    double get(int index) const;
    double total() const;
    int capacity() const { return capacity_; }

    // Index of the leaf owning prefix mass u in [0, total).
    int find_prefix(double u) const;

    void rebuild();  // exact bottom-up resum

private:
    int capacity_;
    int base_;  // leaves live at [base_, base_ + capacity_)
    std::vector<double> nodes_;
    std::uint64_t updates_since_rebuild_ = 0;
};

struct SequenceHandle {
    int slot = -1;
    std::uint64_t insert_id = 0;  // detects eviction between sample and update
};

struct SampleBatch {
    std::vector<Sequence> sequences;
    std::vector<SequenceHandle> handles;
    MatrixXd weights;  // batch x m, normalized so max == 1; pads are 0
};

struct BufferStats {
    int fill = 0;
    int capacity = 0;
    std::int64_t live_transitions = 0;
    std::uint64_t stale_updates = 0;
    double max_priority = 1.0;
    double seq_priority_total = 0.0;
};

// Replay store with sequence-level sampling priorities and transition-level
// bias-annealing priorities, kept in two sum trees. Thread-safe for
// concurrent producers with a single sampling consumer.
class DualPriorityBuffer {
public:
    DualPriorityBuffer(int capacity, int sequence_length, double eta = 0.9,
                       double beta = 0.4);

    void append(const std::vector<Sequence>& sequences);
    void append(const Sequence& sequence);

    SampleBatch sample(int batch_size, std::mt19937_64& rng) const;

    // new_priorities already combine per-sequence TD errors via
    // compute_sequence_priority; abs_td holds one |delta| per transition.
    void update_priorities(const std::vector<SequenceHandle>& handles,
                           const std::vector<double>& new_priorities,
                           const std::vector<std::vector<double>>& abs_td);

    void clear();

    int size() const;
    int sequence_length() const { return m_; }
    double eta() const { return eta_; }
    double beta() const { return beta_; }
    BufferStats stats() const;

    static constexpr double kPriorityFloor = 1e-6;

private:
    struct Slot {
        Sequence seq;
        std::uint64_t insert_id = 0;
        bool occupied = false;
    };

    void store_locked(const Sequence& sequence);

    int capacity_;
    int m_;
    double eta_, beta_;
    std::vector<Slot> slots_;
    mutable SumTree seq_tree_;
    mutable SumTree trans_tree_;
    int next_slot_ = 0;
    int size_ = 0;
    std::uint64_t next_insert_id_ = 1;
    std::int64_t live_transitions_ = 0;
    double max_priority_ = 1.0;
    std::uint64_t stale_updates_ = 0;
    mutable std::mutex mutex_;
};

}  // namespace rd2::replay
